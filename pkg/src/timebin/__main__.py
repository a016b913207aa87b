import sys

from timebin.cli import main

sys.exit(main())
