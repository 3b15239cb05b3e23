from __future__ import annotations

import pytest

from util import build_f1, f1_instance


@pytest.fixture
def f1():
    return build_f1()


@pytest.fixture
def f1_inst():
    return f1_instance()
