"""Shared fixtures. The full desk-scale training campaign is expensive, so
it is trained once per session and shared by the workflow and acceptance
suites."""

import pytest

from zonetrace import harness


@pytest.fixture(scope="session")
def desk_campaign(tmp_path_factory):
    """Desk-scale surrogate archive: result, archive dir, and manifest."""
    out = tmp_path_factory.mktemp("desk-campaign")
    config = harness.CampaignConfig.desk(seed=0)
    result = harness.train_campaign(config, out_dir=out)
    assert not result.failures, result.failures
    _, manifest = harness.load_campaign(out)
    return result, out, manifest
