import os
import tempfile
from pathlib import Path

import pytest
import torch

# keep generated fixtures and frost textures out of the user's home cache
os.environ.setdefault("DIFFGUIDE_CACHE", str(Path(tempfile.gettempdir()) / "diffguide-test-cache"))
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixture_dir():
    from diffguide.harness.config import fixture_dir as default_fixture_dir
    from diffguide.harness.data import make_fixture

    root = default_fixture_dir()
    if not (root / "test_B.jsonl").is_file():
        make_fixture(root)
    return root
