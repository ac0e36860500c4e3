"""Hypothesis strategies for wire messages."""
import numpy as np
from hypothesis import strategies as st

from edgeadapt.taxonomy import SemanticSchema, TaxonomyTree, encode_table
from edgeadapt.transport import (DomainVerdict, FrameBatchUpload, Hello, ModelDispatch,
                                 ModelRequest, RetrainNotice, TaxonomySync, WindowReport)
from edgeadapt.world import ExpertModel

values = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=6)
paths = st.lists(values, max_size=3).map(tuple)
u32 = st.integers(0, 2 ** 32 - 1)
u64 = st.integers(0, 2 ** 64 - 1)
devices = st.integers(0, 2 ** 64 - 1)


@st.composite
def feature_blocks(draw):
    n = draw(st.integers(1, 4))
    d = draw(st.integers(1, 4))
    flat = draw(st.lists(st.floats(allow_nan=False, width=64), min_size=n * d,
                         max_size=n * d))
    return np.array(flat, dtype=np.float64).reshape(n, d)


@st.composite
def models(draw):
    return ExpertModel(draw(paths), draw(st.integers(1, 2 ** 32 - 1)),
                       draw(st.floats(0, 1)), draw(st.integers(1, 300)),
                       tuned_for=draw(st.none() | paths),
                       tune_progress=draw(st.floats(0, 1)))


@st.composite
def tables(draw):
    tree = TaxonomyTree(SemanticSchema(("a", "b", "c")))
    for path, version in draw(st.lists(st.tuples(paths, st.integers(1, 9)), max_size=5)):
        tree.set_model(path, version)
    return encode_table(tree)


messages = st.one_of(
    st.builds(Hello, device_id=devices),
    st.builds(FrameBatchUpload, device_id=devices, window_id=u32, handle=u64,
              features=feature_blocks(), frame_bytes=st.integers(0, 64)),
    st.builds(DomainVerdict, device_id=devices, shift_confirmed=st.booleans(), path=paths,
              labels=st.lists(st.integers(-2 ** 31, 2 ** 31 - 1), max_size=8).map(tuple),
              handle=u64),
    st.builds(ModelRequest, device_id=devices, path=paths),
    st.builds(ModelDispatch, device_id=devices, path=paths, model=st.none() | models()),
    st.builds(TaxonomySync, device_id=devices, table=tables()),
    st.builds(WindowReport, device_id=devices, window_id=u32, path=paths,
              accuracy=st.floats(allow_nan=False)),
    st.builds(RetrainNotice, device_id=devices, path=paths, version=u32),
)
