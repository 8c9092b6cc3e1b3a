import sys

from regpool.cli import main

sys.exit(main())
