"""Per-modality MLP encoders and batch encoding."""

import numpy as np
import pytest

from gradcheck import check_grads

from geoalign import tensor as T
from geoalign.coord_encoder import CoordEncoder, CoordEncoderConfig
from geoalign.errors import ConfigError, ShapeError
from geoalign.geo import GeoCoordinate
from geoalign.modality import (
    FEATURE_MODALITIES,
    MODALITIES,
    EncoderSet,
    ModalityEncoder,
    encode_batch,
)
from geoalign.nn import Adam
from geoalign.synthdata import Bbox, LatentField, gen_dataset
from geoalign.tensor import ComputationGraph


def _encoder_set(dim=16, input_dim=8, seed=0, coord=True):
    rng = np.random.default_rng(seed)
    feature = {m: ModalityEncoder(m, input_dim, dim, rng) for m in FEATURE_MODALITIES}
    coord_enc = (
        CoordEncoder(
            CoordEncoderConfig(dim=dim, scales=(1.0, 8.0), depth=1, registers=1,
                               heads=2, seed=seed),
            rng,
        )
        if coord
        else None
    )
    return EncoderSet(feature, coord_enc)


@pytest.fixture(scope="module")
def batch8():
    field = LatentField(seed=3, bbox=Bbox(-100, 35, -90, 45))
    return gen_dataset(field, 8, seed=5, input_dims={m: 8 for m in FEATURE_MODALITIES})


class TestModalityEncoder:
    def test_shared_dimension_contract(self):
        enc = _encoder_set(dim=16)
        x = np.random.default_rng(0).normal(size=(3, 8))
        for m in FEATURE_MODALITIES:
            assert enc.feature[m].encode(x).shape == (3, 16)

    def test_identical_inputs_identical_embeddings(self):
        enc = ModalityEncoder("street", 8, 16, np.random.default_rng(1))
        x = np.random.default_rng(2).normal(size=(1, 8))
        out = enc.encode(np.vstack([x, x]))
        assert np.array_equal(out[0], out[1])

    def test_zeroed_final_layer_gives_constant_bias_pattern(self):
        enc = ModalityEncoder("dsm", 8, 16, np.random.default_rng(3))
        enc.w3.value[...] = 0.0
        enc.b3.value[...] = np.random.default_rng(4).normal(size=16)
        out = enc.encode(np.random.default_rng(5).normal(size=(4, 8)))
        # every row is the layer-normalized bias pattern
        assert np.allclose(out, out[0], atol=1e-15)
        b = enc.b3.value
        xhat = (b - b.mean()) / np.sqrt(((b - b.mean()) ** 2).mean() + 1e-5)
        assert np.allclose(out[0], xhat, atol=1e-12)

    def test_input_dim_mismatch_rejected(self):
        enc = ModalityEncoder("text", 8, 16, np.random.default_rng(0))
        with pytest.raises(ShapeError, match="text"):
            enc.encode(np.zeros((2, 9)))

    def test_gps_is_not_an_mlp_modality(self):
        with pytest.raises(ConfigError):
            ModalityEncoder("gps", 8, 16, np.random.default_rng(0))

    def test_gradcheck_all_parameters(self):
        enc = ModalityEncoder("aerial", 5, 8, np.random.default_rng(7))
        x = np.random.default_rng(8).normal(size=(3, 5))

        def make():
            g = ComputationGraph()
            return g, T.mean_all(T.gelu(enc(g, x)))

        check_grads(make, enc.parameters(), np.random.default_rng(9), samples_per_param=4)

    def test_parameter_isolation_between_modalities(self, batch8):
        enc = _encoder_set(dim=16, input_dim=8)
        aerial_before = [p.value.copy() for p in enc.feature["aerial"].parameters()]
        opt = Adam(enc.parameters(), lr=1e-2)
        for _ in range(3):
            opt.zero_grad()
            g = ComputationGraph()
            out = enc.feature["street"](g, np.stack([s.raw["street"] for s in batch8]))
            g.backward(T.mean_all(T.mul(out, out)))
            opt.step()
        for before, p in zip(aerial_before, enc.feature["aerial"].parameters()):
            assert np.array_equal(before, p.value)


class TestEncodeBatch:
    def test_single_sample_five_rows(self, batch8):
        enc = _encoder_set(dim=16, input_dim=8)
        g = ComputationGraph()
        out = encode_batch(enc, batch8[:1], g, MODALITIES)
        assert set(out.blocks) == set(MODALITIES)
        for t in out.blocks.values():
            assert t.data.shape == (1, 16)

    def test_batch_permutation_permutes_rows(self, batch8):
        enc = _encoder_set(dim=16, input_dim=8)
        out = encode_batch(enc, batch8, ComputationGraph(), MODALITIES)
        perm = [3, 1, 7, 0, 5, 2, 6, 4]
        out_p = encode_batch(
            enc, [batch8[i] for i in perm], ComputationGraph(), MODALITIES
        )
        for m in MODALITIES:
            assert np.allclose(out_p.blocks[m].data, out.blocks[m].data[perm], atol=1e-12)

    def test_missing_modality_rejected(self, batch8):
        enc = _encoder_set(dim=16, input_dim=8)
        broken = batch8[0].__class__(
            batch8[0].id, batch8[0].coord, batch8[0].timestamp,
            {k: v for k, v in batch8[0].raw.items() if k != "dsm"},
        )
        with pytest.raises(ConfigError, match="dsm"):
            encode_batch(enc, [broken], ComputationGraph(), MODALITIES)

    def test_modality_subset(self, batch8):
        enc = _encoder_set(dim=16, input_dim=8)
        out = encode_batch(enc, batch8, ComputationGraph(), ("street", "gps"))
        assert set(out.blocks) == {"street", "gps"}

    def test_empty_batch_rejected(self):
        enc = _encoder_set()
        with pytest.raises(ConfigError):
            encode_batch(enc, [], ComputationGraph(), MODALITIES)
