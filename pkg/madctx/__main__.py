import sys

from madctx.cli import main

sys.exit(main())
