import sys

from proulearn.cli import main

sys.exit(main())
