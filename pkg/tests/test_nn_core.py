import numpy as np
import pytest
import torch

from fgad.errors import DataError, NumericError
from fgad.nn import (
    Adam,
    MlpSpec,
    OptimizerConfig,
    adam_init,
    adam_step,
    arrays_to_state,
    as_tensor,
    build_mlp,
    finite_difference_gradient,
    gradient_check,
    gradient_penalty,
    load_checkpoint,
    make_generator,
    save_checkpoint,
    state_to_arrays,
)


class TestBuildMlp:
    def test_identity_activation_zero_bias_is_linear(self):
        mlp = build_mlp(MlpSpec((4, 4), hidden_activation="identity",
                                output_activation="identity"), seed=0)
        with torch.no_grad():
            mlp.layers[0].bias.zero_()
        x = torch.randn((3, 4), dtype=torch.float64, generator=make_generator(1))
        y = torch.randn((3, 4), dtype=torch.float64, generator=make_generator(2))
        with torch.no_grad():
            lhs = mlp(2.0 * x + 3.0 * y)
            rhs = 2.0 * mlp(x) + 3.0 * mlp(y)
        torch.testing.assert_close(lhs, rhs)

    def test_same_spec_and_seed_identical_parameters(self):
        a = build_mlp(MlpSpec((5, 7, 2)), seed=9)
        b = build_mlp(MlpSpec((5, 7, 2)), seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            torch.testing.assert_close(pa, pb)

    def test_zero_weights_forward_is_bias(self):
        mlp = build_mlp(MlpSpec((3, 2), output_activation="identity"), seed=0)
        with torch.no_grad():
            mlp.layers[0].weight.zero_()
        x = torch.zeros((1, 3), dtype=torch.float64)
        torch.testing.assert_close(mlp(x)[0], mlp.layers[0].bias)

    def test_rejects_single_width(self):
        with pytest.raises(DataError):
            MlpSpec((4,))

    def test_rejects_unknown_activation(self):
        with pytest.raises(DataError, match="activation"):
            MlpSpec((4, 2), hidden_activation="swishish")


class TestGradientPenalty:
    def test_unit_gradient_critic_gives_zero(self):
        critic = lambda x: x.sum(dim=1)  # gradient norm sqrt(dim) = 1 at dim 1
        real = torch.randn((8, 1), dtype=torch.float64, generator=make_generator(0))
        fake = torch.randn((8, 1), dtype=torch.float64, generator=make_generator(1))
        penalty = gradient_penalty(critic, real, fake, seed=3)
        assert penalty.item() == pytest.approx(0.0, abs=1e-12)

    def test_constant_critic_gives_one(self):
        critic = lambda x: torch.zeros(x.shape[0], dtype=torch.float64)
        real = torch.randn((6, 3), dtype=torch.float64, generator=make_generator(0))
        fake = torch.randn((6, 3), dtype=torch.float64, generator=make_generator(1))
        assert gradient_penalty(critic, real, fake, seed=3).item() == pytest.approx(1.0)

    def test_matches_finite_difference_gradient_norms(self):
        mlp = build_mlp(MlpSpec((3, 5, 1)), seed=4)
        critic = lambda x: mlp(x).squeeze(-1)
        real = torch.randn((4, 3), dtype=torch.float64, generator=make_generator(0))
        fake = torch.randn((4, 3), dtype=torch.float64, generator=make_generator(1))
        gen = make_generator(7)
        eps = torch.rand((4, 1), generator=gen, dtype=torch.float64)
        mixed = eps * fake + (1 - eps) * real
        norms = []
        for row in mixed:
            g = finite_difference_gradient(lambda v: critic(v.reshape(1, -1)).item(), row)
            norms.append(float(g.norm()))
        expected = float(np.mean([(n - 1.0) ** 2 for n in norms]))
        got = gradient_penalty(critic, real, fake, make_generator(7)).item()
        assert got == pytest.approx(expected, rel=1e-3)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError, match="shapes differ"):
            gradient_penalty(lambda x: x.sum(1), torch.zeros((2, 3)), torch.zeros((3, 3)), 0)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        params = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
        grads = {"w": torch.zeros(2, dtype=torch.float64)}
        state = adam_init(params)
        new_params, _ = adam_step(params, grads, state, OptimizerConfig())
        torch.testing.assert_close(new_params["w"], params["w"])

    def test_first_step_moves_by_learning_rate(self):
        cfg = OptimizerConfig(learning_rate=0.01)
        params = {"w": torch.tensor([0.0], dtype=torch.float64)}
        grads = {"w": torch.tensor([1.0], dtype=torch.float64)}
        new_params, _ = adam_step(params, grads, adam_init(params), cfg)
        # bias-corrected m/v are both the raw gradient, so the step is ~lr
        assert new_params["w"].item() == pytest.approx(-0.01, rel=1e-6)

    def test_two_steps_match_hand_recurrence(self):
        cfg = OptimizerConfig(learning_rate=0.1, beta1=0.9, beta2=0.999, epsilon=1e-8)
        w = 0.5
        grads = [0.3, -0.2]
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        params = {"w": torch.tensor([0.5], dtype=torch.float64)}
        state = adam_init(params)
        for g in grads:
            params, state = adam_step(
                params, {"w": torch.tensor([g], dtype=torch.float64)}, state, cfg
            )
        assert params["w"].item() == pytest.approx(w, rel=1e-12)

    def test_identical_runs_identical_trajectories(self):
        def run():
            mlp = build_mlp(MlpSpec((3, 4, 1)), seed=1)
            opt = Adam.for_module(mlp, OptimizerConfig(learning_rate=1e-2))
            x = torch.ones((5, 3), dtype=torch.float64)
            for _ in range(5):
                loss = (mlp(x) ** 2).sum()
                opt.zero_grad()
                loss.backward()
                opt.step()
            return [p.detach().clone() for p in mlp.parameters()]

        for pa, pb in zip(run(), run()):
            torch.testing.assert_close(pa, pb)

    def test_non_finite_gradient_names_block(self):
        params = {"encoder.w": torch.zeros(2, dtype=torch.float64)}
        grads = {"encoder.w": torch.tensor([np.inf, 0.0], dtype=torch.float64)}
        with pytest.raises(NumericError, match="encoder.w"):
            adam_step(params, grads, adam_init(params), OptimizerConfig())


class TestGradientCheckHelper:
    def test_analytic_matches_fd_on_mlp(self):
        mlp = build_mlp(MlpSpec((4, 6, 3)), seed=2)
        x = torch.randn((2, 4), dtype=torch.float64, generator=make_generator(3))
        err = gradient_check(lambda t: (mlp(t) ** 2).sum(), x)
        assert err < 1e-7


class TestCheckpointIO:
    def test_round_trip_preserves_outputs(self, tmp_path):
        mlp = build_mlp(MlpSpec((3, 5, 2)), seed=8)
        path = save_checkpoint(tmp_path / "m.json", "mlp",
                               {"spec": mlp.spec.to_dict(), "state": state_to_arrays(mlp)})
        doc = load_checkpoint(path, "mlp")
        clone = build_mlp(MlpSpec.from_dict(doc["spec"]), seed=99)
        arrays_to_state(clone, doc["state"])
        x = torch.randn((4, 3), dtype=torch.float64, generator=make_generator(0))
        torch.testing.assert_close(mlp(x), clone(x))

    def test_kind_mismatch_rejected(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.json", "mlp", {})
        with pytest.raises(DataError, match="expected 'detector'"):
            load_checkpoint(path, "detector")

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other", "kind": "mlp"}')
        with pytest.raises(DataError, match="unknown checkpoint format"):
            load_checkpoint(path)
