import numpy as np
import pytest

from epg_pricing.core import ActionInterval, SegmentSpace
from epg_pricing.environments import build_environment, load_config
from epg_pricing.models import GlmSpec, LogisticLink, ResponseModel, SegmentAffineKernel, margin_reward


@pytest.fixture(scope="session")
def logit_env():
    return build_environment(load_config("logit-2seg"))


@pytest.fixture(scope="session")
def gauss_env():
    return build_environment(load_config("gauss-1seg"))


def sigmoid(w):
    # independent scalar routine, not the package's link
    return 1.0 / (1.0 + np.exp(-w))


def one_segment_logit(alpha, beta, cost=0.3, lo=0.0, hi=1.0):
    """Single-segment Bernoulli pricing model with ``w = alpha + beta a``."""
    iv = ActionInterval(lo, hi)
    space = SegmentSpace(("s",), (1.0,), (cost,))
    model = ResponseModel(GlmSpec(SegmentAffineKernel(1), LogisticLink()), [alpha, beta], iv, space)
    return model, margin_reward(space.costs, 1.0, iv)
