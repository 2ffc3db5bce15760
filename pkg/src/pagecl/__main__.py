import sys

from pagecl.cli import main

sys.exit(main())
