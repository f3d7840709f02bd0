import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# derandomised so repeated runs of the suite see the same examples
settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("repo")
