import json
import math

import numpy as np
import pytest

from csilab.autograd import Tensor
from csilab.channel import generate_channels
from csilab.errors import (
    CorruptHeaderError,
    TensorShapeError,
    TrainingDivergedError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from csilab.models import ModelConfig, crnet_build
from csilab.training import (
    Adam,
    Checkpoint,
    CurveLog,
    CurveRow,
    TrainConfig,
    evaluate,
    load_checkpoint,
    lr_at,
    rebuild_model,
    save_checkpoint,
    train,
)


def small_ds(seed=1, count=8):
    return generate_channels(seed, count)


def tiny_cfg(**kw):
    base = dict(epochs=4, warmup_epochs=1, batch_size=200, seed=0, eval_every=2)
    base.update(kw)
    return TrainConfig(**base)


PAPER_CFG = TrainConfig()  # 2500 epochs, warmup 30, 2e-3 -> 5e-5


class TestTrainConfig:
    def test_defaults_match_reference_recipe(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.warmup_epochs) == (2500, 30)
        assert (cfg.gamma_max, cfg.gamma_min) == (2e-3, 5e-5)
        assert cfg.scheduler == "cosine"
        assert cfg.batch_size == 200
        assert cfg.const_lr == 1e-3

    @pytest.mark.parametrize(
        "kw",
        [
            dict(warmup_epochs=2500),
            dict(gamma_max=1e-5),
            dict(gamma_min=0.0),
            dict(scheduler="linear"),
            dict(epochs=0),
            dict(batch_size=0),
        ],
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestLrSchedule:
    def test_warmup_end_hits_gamma_max(self):
        assert abs(lr_at(30, PAPER_CFG) - 2e-3) < 1e-12

    def test_final_epoch_hits_gamma_min(self):
        assert abs(lr_at(2500, PAPER_CFG) - 5e-5) < 1e-12

    def test_cosine_midpoint(self):
        assert abs(lr_at((30 + 2500) // 2, PAPER_CFG) - 1.025e-3) < 1e-12

    def test_peak_to_floor_ratio_is_40(self):
        assert abs(lr_at(30, PAPER_CFG) / lr_at(2500, PAPER_CFG) - 40.0) < 1e-9

    def test_linear_ramp_midpoint(self):
        assert abs(lr_at(15, PAPER_CFG) - 1e-3) < 1e-12

    def test_ramp_starts_at_zero(self):
        assert lr_at(0, PAPER_CFG) == 0.0

    def test_continuity_at_warmup_boundary(self):
        ramp_end = PAPER_CFG.gamma_max * 30 / 30
        cosine_start = lr_at(30, PAPER_CFG)
        assert abs(ramp_end - cosine_start) < 1e-15

    def test_monotone_both_segments(self):
        lrs = [lr_at(t, PAPER_CFG) for t in range(0, 2501)]
        for t in range(30):
            assert lrs[t + 1] > lrs[t]
        for t in range(30, 2500):
            assert lrs[t + 1] <= lrs[t]

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            lr_at(2501, PAPER_CFG)
        with pytest.raises(ValueError):
            lr_at(-1, PAPER_CFG)

    def test_const_scheduler(self):
        cfg = TrainConfig(scheduler="const", epochs=1000)
        assert all(lr_at(t, cfg) == 1e-3 for t in (0, 1, 500, 1000))


class TestAdam:
    def test_first_step_closed_form(self):
        theta = Tensor(np.array([1.0]), requires_grad=True)
        theta.grad = np.array([0.5])
        adam = Adam([("theta", theta)])
        adam.step(1e-3)
        # m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)
        assert theta.data[0] == pytest.approx(expected, abs=1e-12)

    def test_zero_gradient_keeps_parameters(self):
        theta = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        theta.grad = np.zeros(2)
        adam = Adam([("theta", theta)])
        adam.step(1e-3)
        np.testing.assert_array_equal(theta.data, [1.0, -2.0])

    def test_nan_gradient_fails_fast(self):
        theta = Tensor(np.array([1.0]), requires_grad=True)
        theta.grad = np.array([np.nan])
        adam = Adam([("theta", theta)])
        with pytest.raises(TrainingDivergedError):
            adam.step(1e-3)

    def test_first_step_scale_invariance(self):
        lr = 1e-3
        deltas = []
        for scale in (1.0, 2.0):
            theta = Tensor(np.array([0.7]), requires_grad=True)
            theta.grad = np.array([scale * 0.31])
            Adam([("t", theta)]).step(lr)
            deltas.append(0.7 - theta.data[0])
        assert abs(deltas[0] - deltas[1]) < 1e-6 * lr

    def test_deterministic_trajectory(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=4) for _ in range(5)]
        results = []
        for _ in range(2):
            theta = Tensor(np.zeros(4), requires_grad=True)
            adam = Adam([("t", theta)])
            for g in grads:
                theta.grad = g.copy()
                adam.step(2e-3)
            results.append(theta.data.copy())
        np.testing.assert_array_equal(results[0], results[1])


class TestEvaluate:
    class IdentityStub:
        def forward(self, x, training=False):
            return x

    def test_identity_stub_gives_minus_inf(self):
        ds = small_ds()
        assert evaluate(self.IdentityStub(), ds) == float("-inf")

    def test_untrained_model_finite(self):
        ds = small_ds()
        model = crnet_build(ModelConfig(ratio="1/4"), rng=0)
        db = evaluate(model, ds)
        assert math.isfinite(db)

    def test_repeatable(self):
        ds = small_ds()
        model = crnet_build(ModelConfig(ratio="1/4"), rng=0)
        assert evaluate(model, ds) == evaluate(model, ds)

    def test_empty_rejected(self):
        ds = small_ds()
        empty = ds.slice(0, 0)
        with pytest.raises(ValueError):
            evaluate(self.IdentityStub(), empty)


class TestTrainLoop:
    def test_single_epoch_log(self):
        ds = small_ds()
        model = crnet_build(ModelConfig(ratio="1/4"), rng=0)
        cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=200, seed=3, eval_every=1)
        ckpt, log = train(model, ds, cfg, val_ds=None)
        assert len(log.rows) == 1
        assert log.rows[0].epoch == 0
        assert log.rows[0].lr == lr_at(0, cfg)
        assert math.isfinite(log.rows[0].train_loss)

    def test_determinism_bit_identical_logs(self, tmp_path):
        ds = small_ds()
        csvs = []
        for run in range(2):
            model = crnet_build(ModelConfig(ratio="1/4"), rng=7)
            ckpt, log = train(model, ds, tiny_cfg(), val_ds=ds)
            p = tmp_path / f"run{run}.csv"
            log.to_csv(p)
            csvs.append(p.read_bytes())
        assert csvs[0] == csvs[1]

    def test_best_checkpoint_not_worse_than_init(self):
        ds = small_ds()
        model = crnet_build(ModelConfig(ratio="1/4"), rng=1)
        ckpt, log = train(model, ds, tiny_cfg(), val_ds=ds)
        assert log.init_val_nmse_db is not None
        assert ckpt.val_nmse_db <= log.init_val_nmse_db

    def test_epochs_strictly_increasing(self):
        ds = small_ds()
        model = crnet_build(ModelConfig(ratio="1/4"), rng=1)
        _, log = train(model, ds, tiny_cfg(), val_ds=None)
        epochs = [r.epoch for r in log.rows]
        assert epochs == sorted(set(epochs))

    def test_empty_dataset_rejected(self):
        ds = small_ds()
        model = crnet_build(ModelConfig(ratio="1/4"), rng=0)
        with pytest.raises(ValueError):
            train(model, ds.slice(0, 0), tiny_cfg())

    def test_mismatched_norms_rejected(self):
        a = generate_channels(1, 4)
        b = generate_channels(2, 4)  # different norm
        model = crnet_build(ModelConfig(ratio="1/4"), rng=0)
        with pytest.raises(ValueError):
            train(model, a, tiny_cfg(), val_ds=b)

    def test_partial_final_batch_allowed(self):
        ds = small_ds(count=10)
        model = crnet_build(ModelConfig(ratio="1/4"), rng=0)
        cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=8, seed=0, eval_every=2)
        _, log = train(model, ds, cfg, val_ds=None)
        assert len(log.rows) == 2


class TestCurveLog:
    def test_csv_roundtrip(self, tmp_path):
        log = CurveLog(
            rows=[
                CurveRow(0, 0.0, 0.125, None),
                CurveRow(1, 2e-3, 0.0625, -12.5),
                CurveRow(2, 1.9e-3, 0.03125, float("-inf")),
            ]
        )
        p = log.to_csv(tmp_path / "log.csv")
        back = CurveLog.from_csv(p)
        assert back.rows == log.rows

    def test_reexport_byte_identical(self, tmp_path):
        log = CurveLog(rows=[CurveRow(0, 1e-3, 0.1, -3.25), CurveRow(1, 1e-3, 0.05, None)])
        p1 = log.to_csv(tmp_path / "a.csv")
        p2 = CurveLog.from_csv(p1).to_csv(tmp_path / "b.csv")
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_validated(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("epoch,loss\n0,0.1\n")
        with pytest.raises(ValueError):
            CurveLog.from_csv(p)


class TestCheckpointIO:
    def make_trained(self, tmp_path):
        ds = small_ds()
        model = crnet_build(ModelConfig(ratio="1/4"), rng=2)
        ckpt, _ = train(model, ds, tiny_cfg(epochs=2, eval_every=1), val_ds=ds)
        path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
        return ds, model, ckpt, path

    def test_roundtrip_preserves_eval_outputs_bitwise(self, tmp_path):
        ds, model, ckpt, path = self.make_trained(tmp_path)
        loaded = load_checkpoint(path)
        rebuilt = rebuild_model(loaded)
        reference = rebuild_model(ckpt)
        from csilab.autograd import no_grad

        x = Tensor(ds.images[:4])
        with no_grad():
            a = reference.forward(x).data
            b = rebuilt.forward(x).data
        assert np.array_equal(a, b)

    def test_manifest_fields(self, tmp_path):
        ds, model, ckpt, path = self.make_trained(tmp_path)
        manifest = json.loads((tmp_path / "m.ckpt.json").read_text())
        assert manifest["magic"] == "CSICKPT"
        assert manifest["version"] == 1
        assert manifest["kind"] == "crnet"
        assert manifest["config"]["ratio"] == "1/4"
        assert manifest["rng_state"]["seed"] == 0
        assert manifest["optimizer"]["step"] > 0

    def test_optimizer_state_roundtrip(self, tmp_path):
        ds, model, ckpt, path = self.make_trained(tmp_path)
        loaded = load_checkpoint(path)
        assert loaded.optimizer is not None
        assert loaded.optimizer["step"] == ckpt.optimizer["step"]
        for name in ckpt.optimizer["m"]:
            np.testing.assert_array_equal(loaded.optimizer["m"][name], ckpt.optimizer["m"][name])

    def test_missing_optimizer_loads_model_only(self, tmp_path):
        ds, model, ckpt, _ = self.make_trained(tmp_path)
        bare = Checkpoint(
            kind=ckpt.kind,
            model_config=ckpt.model_config,
            epoch=ckpt.epoch,
            arrays=ckpt.arrays,
            optimizer=None,
            rng_state=ckpt.rng_state,
        )
        path = save_checkpoint(bare, "m2.ckpt" if False else ckpt_path(ckpt))  # placeholder
        assert False

    def test_bad_magic(self, tmp_path):
        ds, model, ckpt, path = self.make_trained(tmp_path)
        hp = tmp_path / "m.ckpt.json"
        manifest = json.loads(hp.read_text())
        manifest["magic"] = "NOPE"
        hp.write_text(json.dumps(manifest))
        with pytest.raises(CorruptHeaderError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        ds, model, ckpt, path = self.make_trained(tmp_path)
        hp = tmp_path / "m.ckpt.json"
        manifest = json.loads(hp.read_text())
        manifest["version"] = 9
        hp.write_text(json.dumps(manifest))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        ds, model, ckpt, path = self.make_trained(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(TruncatedPayloadError):
            load_checkpoint(path)

    def test_tampered_shape_rejected(self, tmp_path):
        ds, model, ckpt, path = self.make_trained(tmp_path)
        hp = tmp_path / "m.ckpt.json"
        manifest = json.loads(hp.read_text())
        # swap two dims: payload size still matches, model shape does not
        entry = next(e for e in manifest["tensors"] if e["name"] == "enc.fc.weight")
        entry["shape"] = [entry["shape"][1], entry["shape"][0]]
        hp.write_text(json.dumps(manifest))
        loaded = load_checkpoint(path)
        with pytest.raises(TensorShapeError):
            rebuild_model(loaded)
