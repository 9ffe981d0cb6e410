import sys

from osdkit.cli import main

sys.exit(main())
