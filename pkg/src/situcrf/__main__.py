import sys

from situcrf.cli import main

sys.exit(main())
