import logging

import pytest

from ssitls.crypto import DeterministicRng, SignatureSuite
from ssitls.provision import Universe, build_universe

logging.getLogger("ssitls").setLevel(logging.ERROR)

ALL_SUITES = tuple(SignatureSuite)


@pytest.fixture(scope="session")
def universes() -> dict[SignatureSuite, Universe]:
    """One shared read-only universe per suite (in-memory ledger).

    Tests that mutate ledger state (rotation, deactivation) must build
    their own universe instead of touching these.
    """
    return {suite: build_universe(suite, rng=DeterministicRng(suite.value.encode()))
            for suite in ALL_SUITES}


@pytest.fixture(scope="session")
def ed_universe(universes) -> Universe:
    return universes[SignatureSuite.ED25519]


@pytest.fixture()
def fresh_universe() -> Universe:
    """Mutable throwaway universe (cheapest suite)."""
    return build_universe(SignatureSuite.ED25519)
