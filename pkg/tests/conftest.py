from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from blift.graph import BipartiteGraph


def random_graph(
    seed: int,
    n_outcome: int,
    n_primary: int,
    n_secondary: int,
    edge_prob: float = 0.15,
) -> BipartiteGraph:
    """Erdos-Renyi style bipartite graph with ids in shuffled input order."""
    rng = np.random.default_rng(seed)
    n_t = n_primary + n_secondary
    adj = rng.random((n_outcome, n_t)) < edge_prob
    eo, et = np.nonzero(adj)
    perm = rng.permutation(eo.size)
    t_ids = [f"t{j}" for j in range(n_t)]
    o_ids = [f"o{i}" for i in range(n_outcome)]
    return BipartiteGraph.from_arrays(
        treatment_ids=t_ids,
        is_primary=np.arange(n_t) < n_primary,
        outcome_ids=o_ids,
        edge_outcome=eo[perm],
        edge_treatment=et[perm],
    )


@st.composite
def graphs(draw, max_outcome: int = 60, max_treatment: int = 12):
    n_p = draw(st.integers(1, max_treatment))
    n_s = draw(st.integers(0, max_treatment))
    n_o = draw(st.integers(1, max_outcome))
    prob = draw(st.sampled_from([0.05, 0.2, 0.5]))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_graph(seed, n_o, n_p, n_s, prob)


@st.composite
def graphs_with_assignment(draw, **kw):
    g = draw(graphs(**kw))
    bits = draw(st.lists(st.integers(0, 1), min_size=g.n_treatment, max_size=g.n_treatment))
    z = np.array(bits, dtype=np.int8) * g.is_primary
    return g, z


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
