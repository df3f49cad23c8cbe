import sys

from shoulderx.cli import main

sys.exit(main())
