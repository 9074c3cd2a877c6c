"""
Shared pytest fixtures for grbLMM tests
"""

import pytest

from simulation import clustered_data

# Read-only reference material, not part of the test suite
collect_ignore = ["examples"]


@pytest.fixture
def make_data():
    return clustered_data
