import sys

from snro.cli import main

sys.exit(main())
