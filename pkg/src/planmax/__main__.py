import sys

from planmax.cli import main

sys.exit(main())
