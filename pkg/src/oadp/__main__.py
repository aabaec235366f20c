import sys

from oadp.cli import main

sys.exit(main())
