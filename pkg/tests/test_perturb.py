import numpy as np
import pytest

import udpkit.perturb as perturb_mod
from udpkit.autodiff import ComputationGraph, Tensor, finite_diff_grad
from udpkit.binio import FileFormatError
from udpkit.datakit import ToySpec, gen_toy_dataset
from udpkit.diffusion import init_denoiser, simple_loss
from udpkit.perturb import (
    PerturbConfig,
    PerturbationSet,
    apply_perturbation,
    clip_linf,
    generate,
    generate_eudp,
    generate_random,
    generate_udp,
    perturb_step,
    read_pset,
    write_pset,
    zero_perturbations,
)
from udpkit.scheduler import make_linear_schedule, uniform_distribution

RHO = 16 / 255
SCHED = make_linear_schedule(0.02, 0.3, 5)
SPEC = ToySpec(H=8, W=8, num_classes=2, per_class=8, shape_kinds={0: "disk", 1: "square"}, seed=11)


@pytest.fixture(scope="module")
def ds():
    return gen_toy_dataset(SPEC)


def tiny_config(**kw):
    base = dict(N=2, K=3, M=1, eta=0.05, lam=RHO / 10, rho=RHO, timestep_dist="uniform", batch_size=4)
    base.update(kw)
    return PerturbConfig(**base)


class TestClipLinf:
    def test_clamps_to_bound(self):
        out = clip_linf(Tensor([0.1, -0.2]), RHO)
        assert abs(out.values[0] - RHO) < 1e-15
        assert abs(out.values[1] + RHO) < 1e-15
        assert abs(out.values[0] - 0.062745) < 1e-6

    def test_within_bound_unchanged(self):
        out = clip_linf(Tensor([0.01, -0.02]), RHO)
        assert out.values.tolist() == [0.01, -0.02]

    def test_zero_fixed_point(self):
        assert clip_linf(Tensor([0.0]), RHO).values.tolist() == [0.0]

    def test_bad_rho(self):
        with pytest.raises(ValueError, match="rho"):
            clip_linf(Tensor([0.0]), 0.0)


class TestPerturbStep:
    def test_matches_sign_of_independent_gradient(self):
        rng_model = np.random.default_rng(2)
        model = init_denoiser(64, [16], 4, rng_model)
        img = gen_toy_dataset(SPEC).images[0]
        delta = Tensor(np.zeros(64), (8, 8))
        t, lam = 3, 0.01

        new = perturb_step(model, SCHED, img, delta, t, lam, RHO, np.random.default_rng(5))

        eps = np.random.default_rng(5).standard_normal(64)  # same draw as inside the step

        def loss_at(x):
            g = ComputationGraph()
            leaf = Tensor(x.values.reshape(1, 64), requires_grad=x.requires_grad)
            return simple_loss(g, model, SCHED, leaf, t, Tensor(eps.reshape(1, 64)))

        fd = finite_diff_grad(loss_at, Tensor(img.values.copy()), h=1e-5)
        strong = np.abs(fd.values) > 1e-6
        expected = np.clip(delta.values + lam * np.sign(fd.values), -RHO, RHO)
        assert np.array_equal(new.values[strong], expected[strong])
        assert np.max(np.abs(new.values)) <= RHO

    def test_saturating_step_lands_on_lattice(self, ds):
        model = init_denoiser(64, [16], 4, np.random.default_rng(0))
        delta = Tensor(np.zeros(64), (8, 8))
        new = perturb_step(model, SCHED, ds.images[0], delta, 2, RHO, RHO, np.random.default_rng(1))
        assert set(np.round(np.abs(new.values), 12)) <= {0.0, round(RHO, 12)}

    def test_repeated_steps_respect_bound(self, ds):
        model = init_denoiser(64, [16], 4, np.random.default_rng(0))
        rng = np.random.default_rng(3)
        delta = Tensor(np.zeros(64), (8, 8))
        for t in [1, 4, 2, 5, 3, 1, 4]:
            delta = perturb_step(model, SCHED, ds.images[0], delta, t, RHO / 2, RHO, rng)
            assert np.max(np.abs(delta.values)) <= RHO

    def test_entry_bound_checked(self, ds):
        model = init_denoiser(64, [16], 4, np.random.default_rng(0))
        too_big = Tensor(np.full(64, 2 * RHO), (8, 8))
        with pytest.raises(ValueError, match="bound"):
            perturb_step(model, SCHED, ds.images[0], too_big, 1, RHO / 10, RHO, np.random.default_rng(0))

    @pytest.mark.parametrize("seed", range(20))
    def test_small_step_does_not_decrease_loss(self, ds, seed):
        # frozen model, fixed (t, eps): ascent property of the sign step
        rng = np.random.default_rng(seed)
        model = init_denoiser(64, [12], 4, np.random.default_rng(seed + 100))
        img = ds.images[seed % len(ds.images)]
        delta = Tensor(rng.uniform(-RHO / 2, RHO / 2, 64), (8, 8))
        t = int(rng.integers(1, SCHED.T + 1))

        eps = np.random.default_rng(seed + 500).standard_normal(64)

        def loss_of(dlt):
            g = ComputationGraph()
            leaf = Tensor((img.values + dlt.values).reshape(1, 64), requires_grad=True)
            return simple_loss(g, model, SCHED, leaf, t, Tensor(eps.reshape(1, 64))).item()

        before = loss_of(delta)
        new = perturb_step(model, SCHED, img, delta, t, 1e-4, RHO, np.random.default_rng(seed + 500))
        after = loss_of(new)
        assert after >= before - 1e-12


class TestGenerate:
    def test_n_zero_returns_zero_init(self, ds):
        res = generate_udp(ds, SCHED, tiny_config(N=0), np.random.default_rng(0), hidden_dims=(16,))
        assert res.pset.max_abs() == 0.0
        assert res.pset.method == "udp"
        assert res.train_losses == []

    def test_bound_holds_at_return(self, ds):
        res = generate_udp(ds, SCHED, tiny_config(), np.random.default_rng(0), hidden_dims=(16,))
        assert res.pset.max_abs() <= RHO
        assert len(res.pset) == len(ds)

    def test_seed_determinism(self, ds):
        outs = [
            generate_udp(ds, SCHED, tiny_config(), np.random.default_rng(42), hidden_dims=(16,))
            for _ in range(2)
        ]
        for da, db in zip(outs[0].pset.deltas, outs[1].pset.deltas):
            assert np.array_equal(da.values, db.values)
        assert outs[0].train_losses == outs[1].train_losses

    def test_monitor_sees_every_update(self, ds):
        seen = []
        cfg = tiny_config(N=2, M=2)
        generate_udp(
            ds, SCHED, cfg, np.random.default_rng(0), hidden_dims=(16,),
            delta_monitor=lambda block: seen.append(np.max(np.abs(block))),
        )
        # 16 samples in one block, N*M sweeps
        assert len(seen) == cfg.N * cfg.M
        assert all(v <= RHO for v in seen)

    def test_eudp_with_uniform_override_reproduces_udp(self, ds):
        udp = generate_udp(ds, SCHED, tiny_config(), np.random.default_rng(7), hidden_dims=(16,))
        forced = generate(
            ds, SCHED, tiny_config(timestep_dist="eudp"), np.random.default_rng(7),
            hidden_dims=(16,), delta_dist=uniform_distribution(SCHED.T),
        )
        for da, db in zip(udp.pset.deltas, forced.pset.deltas):
            assert np.array_equal(da.values, db.values)
        for pa, pb in zip(udp.surrogate.parameters(), forced.surrogate.parameters()):
            assert np.array_equal(pa.values, pb.values)

    def test_single_step_schedule_makes_variants_coincide(self, ds):
        one = make_linear_schedule(0.1, 0.1, 1)
        udp = generate_udp(ds, one, tiny_config(), np.random.default_rng(3), hidden_dims=(16,))
        eudp = generate_eudp(
            ds, one, tiny_config(timestep_dist="eudp"), np.random.default_rng(3), hidden_dims=(16,)
        )
        for da, db in zip(udp.pset.deltas, eudp.pset.deltas):
            assert np.array_equal(da.values, db.values)

    def test_wrapper_dist_validation(self, ds):
        with pytest.raises(ValueError, match="uniform"):
            generate_udp(ds, SCHED, tiny_config(timestep_dist="eudp"), np.random.default_rng(0))
        with pytest.raises(ValueError, match="eudp"):
            generate_eudp(ds, SCHED, tiny_config(), np.random.default_rng(0))

    def test_delta_level_draws_follow_eudp_distribution(self, ds, monkeypatch):
        from udpkit.scheduler import eudp_distribution, sample_timestep as real_sample

        recorded = []

        def spy(dist, rng):
            t = real_sample(dist, rng)
            if dist.kind == "eudp":
                recorded.append(t)
            return t

        monkeypatch.setattr(perturb_mod, "sample_timestep", spy)
        tiny2 = make_linear_schedule(0.1, 0.2, 2)
        cfg = tiny_config(N=50, K=0, M=20, timestep_dist="eudp")
        generate_eudp(ds, tiny2, cfg, np.random.default_rng(0), hidden_dims=(8,))
        draws = np.array(recorded)
        assert draws.size == 50 * 20 * len(ds)
        freqs = np.bincount(draws, minlength=3)[1:] / draws.size
        target = eudp_distribution(tiny2).weights
        assert np.max(np.abs(freqs - target)) <= 0.01

    def test_perturb_at_xt_changes_where_delta_enters(self, ds):
        class RecordingModel:
            input_dim = 64

            def __init__(self):
                self.seen = []

            def forward(self, graph, x, ts):
                self.seen.append(x.values.copy())
                return graph.scale(x, 1.0)

        img = ds.images[0]
        delta = Tensor(np.full(64, RHO / 2), (8, 8))
        t = 4
        ab = SCHED.alpha_bar(t)
        eps = np.random.default_rng(9).standard_normal(64)

        plain = RecordingModel()
        perturb_step(plain, SCHED, img, delta, t, RHO / 10, RHO, np.random.default_rng(9))
        expected_plain = np.sqrt(ab) * (img.values + delta.values) + np.sqrt(1 - ab) * eps
        assert np.allclose(plain.seen[0], expected_plain, atol=1e-12)

        literal = RecordingModel()
        perturb_step(
            literal, SCHED, img, delta, t, RHO / 10, RHO, np.random.default_rng(9),
            perturb_at_xt=True,
        )
        expected_literal = np.sqrt(ab) * img.values + np.sqrt(1 - ab) * eps + delta.values
        assert np.allclose(literal.seen[0], expected_literal, atol=1e-12)

    def test_perturb_at_xt_generation_respects_bound(self, ds):
        res = generate_udp(
            ds, SCHED, tiny_config(), np.random.default_rng(1), hidden_dims=(16,),
            perturb_at_xt=True,
        )
        assert res.pset.max_abs() <= RHO
        assert all(np.isfinite(l) for l in res.train_losses)


class TestGenerateRandom:
    def test_full_magnitude_everywhere(self, ds):
        pset = generate_random(ds, RHO, np.random.default_rng(0))
        for d in pset.deltas:
            assert np.all(np.abs(np.abs(d.values) - RHO) < 1e-15)

    def test_reproducible(self, ds):
        a = generate_random(ds, RHO, np.random.default_rng(4))
        b = generate_random(ds, RHO, np.random.default_rng(4))
        for da, db in zip(a.deltas, b.deltas):
            assert np.array_equal(da.values, db.values)

    def test_mean_concentrates_near_zero(self, ds):
        pset = generate_random(ds, RHO, np.random.default_rng(1))
        coords = np.concatenate([d.values for d in pset.deltas])
        # 3-sigma binomial bound on the mean of n i.i.d. +/- rho signs
        bound = 3 * RHO / np.sqrt(coords.size)
        assert abs(coords.mean()) <= bound


class TestApplyPerturbation:
    def test_none_method_sets_flags_only(self, ds):
        out = apply_perturbation(ds, zero_perturbations(ds, RHO))
        assert all(out.protected_flags)
        for a, b in zip(out.images, ds.images):
            assert np.array_equal(a.values, b.values)

    def test_clamps_at_one(self):
        from udpkit.datakit import LabeledDataset

        base = LabeledDataset([Tensor(np.full((8, 8), 1.0))], [0], [False], {"num_classes": 1})
        pset = PerturbationSet([Tensor(np.full(64, RHO), (8, 8))], RHO, "random")
        out = apply_perturbation(base, pset)
        assert np.all(out.images[0].values == 1.0)

    def test_bounded_deviation_whole_dataset(self, ds):
        pset = generate_random(ds, RHO, np.random.default_rng(2))
        out = apply_perturbation(ds, pset)
        for a, b in zip(out.images, ds.images):
            assert np.max(np.abs(a.values - b.values)) <= RHO + 1e-15

    def test_size_mismatch_rejected(self, ds):
        pset = PerturbationSet([Tensor(np.zeros(64), (8, 8))], RHO, "none")
        with pytest.raises(ValueError, match="holds 1"):
            apply_perturbation(ds, pset)


class TestPerturbationSetType:
    def test_bound_enforced_on_construction(self):
        with pytest.raises(ValueError, match="bound"):
            PerturbationSet([Tensor(np.full(4, 0.5), (2, 2))], 0.1, "udp")

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            PerturbationSet([], 0.1, "fancy")


class TestPerturbConfig:
    def test_defaults_valid(self):
        cfg = PerturbConfig()
        assert cfg.lam <= cfg.rho

    @pytest.mark.parametrize(
        "kw,msg",
        [
            (dict(N=-1), "N, K, M"),
            (dict(lam=0.0), "lambda"),
            (dict(rho=-1.0), "rho"),
            (dict(lam=0.5, rho=0.1), "exceeds"),
            (dict(timestep_dist="gauss"), "timestep_dist"),
            (dict(batch_size=0), "batch_size"),
        ],
    )
    def test_validation(self, kw, msg):
        with pytest.raises(ValueError, match=msg):
            PerturbConfig(**kw)


class TestPsetIO:
    def test_round_trip(self, ds, tmp_path):
        pset = generate_random(ds, RHO, np.random.default_rng(0))
        p1 = tmp_path / "a.udpn"
        write_pset(pset, p1)
        back = read_pset(p1)
        assert back.method == "random"
        assert back.rho == RHO
        for da, db in zip(back.deltas, pset.deltas):
            assert np.array_equal(da.values, db.values)
            assert da.shape == db.shape
        p2 = tmp_path / "b.udpn"
        write_pset(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_rejected(self, ds, tmp_path):
        pset = generate_random(ds, RHO, np.random.default_rng(0))
        p = tmp_path / "p.udpn"
        write_pset(pset, p)
        bad = tmp_path / "bad.udpn"
        bad.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FileFormatError, match="byte offset"):
            read_pset(bad)
