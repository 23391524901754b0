import sys

from fedrr.cli import main

sys.exit(main())
