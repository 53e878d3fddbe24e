import os
import sys
import tempfile

# Settings are read at import time, so the test profile goes first
os.environ.setdefault("COCSI_ENV", "test")
os.environ.setdefault("COCSI_OUT_DIR", tempfile.mkdtemp(prefix="cocsi-runs-"))

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import hypothesis
import numpy as np

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))
