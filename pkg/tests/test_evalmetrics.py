import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refinet import data as D
from refinet.checkpoint import save_checkpoint
from refinet.evalmetrics import EvalRecord, evaluate, psnr, read_eval_csv
from refinet.training import TrainConfig, init_state


def psnr_oracle(a, b, peak=2.0):
    diffs = [(float(x) - float(y)) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))]
    mse = sum(diffs) / len(diffs)
    return 10 * math.log10(peak * peak / mse)


class TestPsnr:
    def test_identical_is_inf(self):
        x = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
        assert psnr(x, x) == math.inf

    def test_constant_offset(self):
        x = np.zeros((3, 4, 4))
        assert psnr(x, x + 0.2) == pytest.approx(20.0, abs=1e-9)

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(-1, 1, (3, 6, 6)), rng.uniform(-1, 1, (3, 6, 6))
        assert psnr(a, b) == pytest.approx(psnr_oracle(a, b), abs=1e-4)

    def test_decreases_with_noise(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-0.5, 0.5, (3, 16, 16))
        noise = rng.normal(size=x.shape)
        vals = [psnr(x, x + s * noise) for s in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 12, elements=st.floats(-1, 1)), arrays(np.float64, 12, elements=st.floats(-1, 1)))
    def test_symmetric(self, a, b):
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(4))


def test_record_row_inf_sentinel():
    assert EvalRecord("x", 0.0, 0.1, math.inf, "B").csv_row()[3] == "inf"


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    cfg = TrainConfig.from_dict(dict(target_res=16, base_filters=4, embedding_dim=8, variant="B"))
    return save_checkpoint(init_state(cfg), tmp_path_factory.mktemp("ck") / "c.rfnt")


class TestEvaluate:
    def test_outputs(self, ckpt, tmp_path):
        D.write_toy_dir(tmp_path / "in", 5, 32, seed=3)
        recs = evaluate(ckpt, tmp_path / "in", tmp_path / "out")
        assert len(recs) == 5
        assert len(list((tmp_path / "out").glob("*_refined.png"))) == 5
        back = read_eval_csv(tmp_path / "out" / "eval.csv")
        assert back == recs
        assert all(r.variant == "B" and r.l1_hr >= 0 for r in recs)

    def test_deterministic(self, ckpt, tmp_path):
        D.write_toy_dir(tmp_path / "in", 3, 16, seed=4)
        evaluate(ckpt, tmp_path / "in", tmp_path / "a")
        evaluate(ckpt, tmp_path / "in", tmp_path / "b")
        assert (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()
        for p in (tmp_path / "a").glob("*.png"):
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_png_matches_metric_input(self, ckpt, tmp_path):
        D.write_toy_dir(tmp_path / "in", 1, 16, seed=5)
        rec = evaluate(ckpt, tmp_path / "in", tmp_path / "out")[0]
        img = D.read_png(tmp_path / "out" / f"{rec.id}_refined.png")
        hr = D.to_chw(D.read_png(tmp_path / "in" / f"{rec.id}.png"))
        l1 = float(np.abs(D.to_chw(img).astype(np.float64) - hr).mean())
        assert l1 == pytest.approx(rec.l1_hr, abs=1 / 127.5)

    def test_too_small(self, ckpt, tmp_path):
        D.write_toy_dir(tmp_path / "in", 1, 8)
        with pytest.raises(ValueError, match="target_res"):
            evaluate(ckpt, tmp_path / "in", tmp_path / "out")
