import os
import pathlib

import pytest

ROOT = pathlib.Path(__file__).resolve().parents[2]


@pytest.fixture(scope="session")
def cli():
    path = os.environ.get("MMI_CLI")
    if not path or not pathlib.Path(path).exists():
        pytest.skip("MMI_CLI does not point at a built mmi binary")
    return path


@pytest.fixture(scope="session")
def schemas():
    return ROOT / "schemas"
