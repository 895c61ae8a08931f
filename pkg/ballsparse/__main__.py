"""Allow `python -m ballsparse`"""

import sys

from ballsparse.main import main

sys.exit(main())
