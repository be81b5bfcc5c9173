import sys

from .sigcli import main

sys.exit(main())
