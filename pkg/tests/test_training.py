import numpy as np
import pytest

from laddernat import tensor as T
from laddernat.data import CorpusSpec, gen_corpus, make_batch
from laddernat.training import (LossBreakdown, TrainConfig, dual_step, elbo_ladder_sup, elbo_lanmt,
                                lr_schedule, train)

from conftest import tiny_bundle


def toy_batch(n=2, vocab=20, seed=0):
    pairs = gen_corpus(CorpusSpec(src_vocab=vocab, tgt_vocab=vocab, pairs=n, min_len=3, max_len=5, seed=seed))
    return make_batch(pairs), pairs


class TestSchedule:
    def test_peak_and_decay(self):
        cfg = TrainConfig(lr_peak=2e-3, warmup_steps=100)
        assert lr_schedule(100, cfg) == pytest.approx(2e-3)
        assert lr_schedule(400, cfg) == pytest.approx(1e-3)
        assert lr_schedule(50, cfg) == pytest.approx(1e-3)
        lrs = [lr_schedule(s, cfg) for s in range(1, 1000)]
        assert max(lrs) == pytest.approx(2e-3)
        assert all(a <= b for a, b in zip(lrs[:99], lrs[1:100]))
        assert all(a >= b for a, b in zip(lrs[99:], lrs[100:]))

    def test_bad_step(self):
        with pytest.raises(ValueError):
            lr_schedule(0, TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [{"patience": 0}, {"beta": -1.0}, {"rho": 1.5}, {"warmup_steps": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestLossBreakdown:
    def test_total(self):
        lb = LossBreakdown(-3.0, -0.5, 2.0, 0.5)
        assert lb.total == pytest.approx(4.5)
        both = lb + LossBreakdown(-1.0, 0.0, 1.0, 2.0)
        assert both.total == pytest.approx(lb.total + 3.0)

    def test_beta_zero_ignores_kl(self):
        b, _ = toy_batch()
        m = tiny_bundle("LaNMT")
        noise = np.zeros((2, 4, 6))
        res = elbo_lanmt(b, m, 0.0, noise=noise)
        assert res.loss.item() == pytest.approx(-(res.token_ll + res.length_ll))
        assert res.kl > 0


class TestGradients:
    def _check(self, f, bundle, n=120):
        rep = T.grad_check(f, bundle.parameters(), eps=1e-6, n_coords=n)
        assert rep["max_rel_error"] < 1e-3, rep

    def test_elbo_lanmt(self, rng):
        b, _ = toy_batch()
        m = tiny_bundle("LaNMT", seed=2)
        noise = rng.standard_normal((2, 4, 6))
        self._check(lambda: elbo_lanmt(b, m, 1.0, "fwd", noise=noise).loss, m)

    @pytest.mark.parametrize("direction", ["src-recon", "tgt-recon"])
    def test_elbo_ladder_sup(self, rng, direction):
        b, _ = toy_batch()
        m = tiny_bundle("LadderNMT", seed=2, rho=0.5)
        noise = rng.standard_normal((2, 4, 6))
        self._check(lambda: elbo_ladder_sup(b, direction, m, 1.0, noise=noise).loss, m)

    @pytest.mark.parametrize("kind", ["LaNMT", "LadderNMT", "AT"])
    def test_every_parameter_gets_gradient(self, kind):
        from laddernat.training import STEPS
        b, _ = toy_batch(4)
        m = tiny_bundle(kind)
        res = STEPS[kind](b, m, TrainConfig(), rng=np.random.default_rng(0))
        for p in m.parameters():
            p.grad = None
        res.loss.backward()
        missing = [n for n, p in m.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert not missing


class TestDualStep:
    def test_reuse_shares_one_sample(self):
        b, _ = toy_batch()
        m = tiny_bundle("LadderNMT")
        res = dual_step(b, m, TrainConfig(), rng=np.random.default_rng(7))
        z_src, z_tgt = res.samples
        assert z_src is z_tgt
        again = dual_step(b, m, TrainConfig(), rng=np.random.default_rng(7))
        assert again.loss.data.tobytes() == res.loss.data.tobytes()

    def test_disabling_reuse_draws_fresh_noise(self):
        b, _ = toy_batch()
        m = tiny_bundle("LadderNMT")
        shared = dual_step(b, m, TrainConfig(), rng=np.random.default_rng(7))
        fresh = dual_step(b, m, TrainConfig(), rng=np.random.default_rng(7), reuse=False)
        assert not np.array_equal(fresh.samples[0].data, fresh.samples[1].data)
        assert fresh.loss.item() != shared.loss.item()


class TestTrainLoop:
    def _data(self, n=40):
        pairs = gen_corpus(CorpusSpec(src_vocab=20, tgt_vocab=20, pairs=n, min_len=3, max_len=5))
        return pairs, pairs[:8]

    def test_patience_one_stops_after_two_validations(self, monkeypatch):
        import laddernat.training as tr
        scores = iter([(0.5, 0.5), (0.4, 0.4), (0.9, 0.9)])
        monkeypatch.setattr(tr, "validate", lambda *a, **k: next(scores))
        pairs, valid = self._data()
        cfg = TrainConfig(patience=1, validate_every=2, max_steps=20, batch_size=8)
        res = train(tiny_bundle("LadderNMT"), pairs, valid, cfg)
        assert res.stopped_early and len(res.log) == 2 and res.best_step == 2

    def test_best_state_restored(self, monkeypatch):
        import laddernat.training as tr
        seen = []

        def fake(bundle, *a, **k):
            seen.append(bundle.state_dict())
            return (0.9, 0.9) if len(seen) == 1 else (0.1, 0.1)

        monkeypatch.setattr(tr, "validate", fake)
        pairs, valid = self._data()
        res = train(tiny_bundle("LaNMT"), pairs, valid, TrainConfig(validate_every=2, max_steps=6, batch_size=8))
        for name, arr in res.bundle.state_dict().items():
            assert arr.tobytes() == seen[0][name].tobytes()

    def test_deterministic(self, tmp_path):
        pairs, valid = self._data()
        cfg = TrainConfig(validate_every=3, max_steps=6, batch_size=8, valid_sentences=4)
        a = train(tiny_bundle("LadderNMT"), pairs, valid, cfg, metrics_path=tmp_path / "a.csv")
        b = train(tiny_bundle("LadderNMT"), pairs, valid, cfg, metrics_path=tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        for (n, p), (_, q) in zip(a.bundle.named_parameters(), b.bundle.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes(), n

    def test_empty_inputs(self):
        pairs, valid = self._data()
        with pytest.raises(ValueError):
            train(tiny_bundle("AT"), [], valid, TrainConfig())
        with pytest.raises(ValueError):
            train(tiny_bundle("AT"), pairs, [], TrainConfig())

    def test_checkpoint_written(self, tmp_path):
        pairs, valid = self._data()
        cfg = TrainConfig(validate_every=2, max_steps=2, batch_size=8, valid_sentences=2)
        train(tiny_bundle("AT"), pairs, valid, cfg, checkpoint=(str(tmp_path), "r0"))
        assert (tmp_path / "r0" / "AT" / "2.ckpt").exists()


@pytest.mark.slow
class TestOverfit:
    @pytest.mark.parametrize("kind", ["LadderNMT", "LaNMT", "AT"])
    def test_ten_pairs(self, kind):
        pairs = gen_corpus(CorpusSpec(src_vocab=20, tgt_vocab=20, pairs=10, min_len=3, max_len=5))
        cfg = TrainConfig(lr_peak=3e-3, warmup_steps=50, batch_size=10, max_steps=500, validate_every=100,
                          patience=10, valid_sentences=10)
        res = train(tiny_bundle(kind), pairs, pairs, cfg)
        assert res.best_score > 0.95
