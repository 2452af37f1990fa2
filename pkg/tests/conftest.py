import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from support import (  # noqa: E402
    gold_echo_engine,
    load_fixture_manifest,
    load_fixture_records,
)


@pytest.fixture(scope="session")
def records():
    return load_fixture_records()


@pytest.fixture(scope="session")
def manifest():
    return load_fixture_manifest()


@pytest.fixture()
def gold_engine(records):
    engine, gateway = gold_echo_engine(records)
    return engine, gateway
