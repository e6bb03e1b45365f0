import pytest

from urbanfix.pipeline import index_dataset, load_queries
from urbanfix.synth import MANIFEST_NAME, SyntheticSpec, generate_synthetic_dataset

STREET_SEED = 20260810
STREET_SPEC = SyntheticSpec(street_length_m=120.0, spacing_m=12.0, n_queries=100)


@pytest.fixture(scope="session")
def street_dataset(tmp_path_factory):
    """The 132-record synthetic street with 100 planted queries, indexed."""
    root = tmp_path_factory.mktemp("street")
    generate_synthetic_dataset(STREET_SPEC, root, seed=STREET_SEED)
    manifest = index_dataset(root / MANIFEST_NAME)
    return {
        "root": root,
        "manifest": manifest,
        "queries": load_queries(root),
        "spec": STREET_SPEC,
        "seed": STREET_SEED,
    }
