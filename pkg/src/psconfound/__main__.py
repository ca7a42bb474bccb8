import sys

from psconfound.cli import main

sys.exit(main())
