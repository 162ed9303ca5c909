import numpy as np
import pytest

from ssmlab import bench as bn
from ssmlab import data as ds
from ssmlab import model as mdl
from ssmlab.model import ModelConfig
from ssmlab.reduce import ReductionConfig


def bench_model():
    cfg = ModelConfig(image_size=8, patch_size=4, in_channels=1, depth=3,
                      d_model=6, d_inner=4, d_state=2, num_classes=3,
                      reduction=ReductionConfig(r=1, sites=(1,)))
    return mdl.init_model(cfg, seed=0)


class TestMeasure:
    def test_rate_positive(self):
        rate, warmup = bn.measure_images_per_second(bench_model(), batch=2,
                                                    warmup=0, iters=2)
        assert rate > 0
        assert warmup >= 3  # warmup floor applies

    def test_iters_validation(self):
        with pytest.raises(ValueError):
            bn.measure_images_per_second(bench_model(), iters=0)

    def test_baseline_speedup_is_exactly_one(self):
        model = bn._with_r(bench_model(), 0)
        res = bn.measure_throughput(model, batch=2, iters=2)
        assert res.speedup == 1.0
        assert res.r == 0 and res.reduction_ratio == 0.0


class TestSweep:
    def test_fields_consistent(self):
        model = bench_model()
        results = bn.sweep(model, [0, 1, 2], batch=2, iters=2)
        assert [b.r for b in results] == [0, 1, 2]
        ratios = [b.reduction_ratio for b in results]
        assert ratios == sorted(ratios)
        flops = [b.flops for b in results]
        assert all(y <= x for x, y in zip(flops, flops[1:]))
        for b in results:
            assert b.images_per_second > 0 and b.speedup > 0
            assert b.accuracy is None

    def test_with_r_shares_weights(self):
        model = bench_model()
        other = bn._with_r(model, 5)
        assert other.patch_proj is model.patch_proj
        assert other.cfg.reduction.r == 5
        assert model.cfg.reduction.r == 1  # original untouched

    def test_accuracy_column_when_dataset_given(self):
        model = bench_model()
        data = ds.synth_dataset(2, 3, 8, seed=0)
        results = bn.sweep(model, [0], dataset=data, batch=2, iters=2)
        assert results[0].accuracy is not None
        assert 0.0 <= results[0].accuracy <= 1.0

    def test_empty_r_values(self):
        with pytest.raises(ValueError):
            bn.sweep(bench_model(), [])

    def test_csv_layout(self, tmp_path):
        results = bn.sweep(bench_model(), [0, 1], batch=2, iters=2)
        path = tmp_path / "bench.csv"
        bn.write_csv(results, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "r,ratio,imgs_per_sec,speedup,accuracy,flops"
        assert len(lines) == 3
        assert lines[1].startswith("0,0.000000,")
