import sys

from hcfmtl.cli import main

sys.exit(main())
