"""Self-verification suite behind the ``verify`` command.

Three families of checks, each with an explicit tolerance and the
maximum observed error:

* central finite differences against every analytic gradient, op by op
  and loss by loss (1e-5 relative; 1e-4 through the mixture statistics
  and energy, whose longer chains accumulate more rounding);
* the membership-statistics cross-check between the graph route and the
  classical EM M-step (1e-12);
* sample energies against a naive determinant-and-inverse evaluation of
  the mixture density (1e-10).

All instances are seeded, so a passing binary passes forever.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import mixture as mx
from . import networks as nets
from .autodiff import Tensor

GRAD_TOL = 1e-5
GRAD_TOL_MIXTURE = 1e-4
CROSS_CHECK_TOL = 1e-12
ENERGY_TOL = 1e-10
INSTANCES = 10


@dataclass
class CheckResult:
    name: str
    tolerance: float
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        mark = "pass" if self.passed else "FAIL"
        return f"[{mark}] {self.name:<38} tol={self.tolerance:<8g} max_err={self.max_error:.3e}"


@dataclass
class VerifyReport:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def render(self) -> str:
        lines = [c.line() for c in self.checks]
        status = "all checks passed" if self.ok else "VERIFICATION FAILED"
        return "\n".join(lines + [status])


def _op_gradient_cases(rng):
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    v = Tensor(rng.standard_normal(3), requires_grad=True)
    s = Tensor(rng.standard_normal(4), requires_grad=True)
    m = rng.standard_normal((3, 3))
    psd = Tensor(m @ m.T + 3.0 * np.eye(3), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3)))
    w2 = Tensor(rng.standard_normal((4, 2)))
    pos = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    return [
        ("op add", lambda: ad.tensor_sum(ad.mul(ad.add(a, b), w)), a),
        ("op sub", lambda: ad.tensor_sum(ad.mul(ad.sub(a, b), w)), b),
        ("op mul", lambda: ad.tensor_sum(ad.mul(ad.mul(a, b), w)), a),
        ("op div", lambda: ad.tensor_sum(ad.div(a, pos)), pos),
        ("op neg", lambda: ad.tensor_sum(ad.mul(ad.neg(a), w)), a),
        ("op exp", lambda: ad.tensor_sum(ad.exp(a)), a),
        ("op log", lambda: ad.tensor_sum(ad.log(pos)), pos),
        ("op relu", lambda: ad.tensor_sum(ad.mul(ad.relu(a), w)), a),
        ("op leaky_relu", lambda: ad.tensor_sum(ad.mul(ad.leaky_relu(a, 0.2), w)), a),
        ("op tanh", lambda: ad.tensor_sum(ad.mul(ad.tanh(a), w)), a),
        ("op sigmoid", lambda: ad.tensor_sum(ad.mul(ad.sigmoid(a), w)), a),
        ("op abs", lambda: ad.tensor_sum(ad.absolute(a)), a),
        ("op clip", lambda: ad.tensor_sum(ad.clip(pos, 0.6, 1.8)), pos),
        ("op matmul", lambda: ad.tensor_sum(ad.matmul(ad.transpose(a), b)), a),
        ("op reshape", lambda: ad.tensor_sum(ad.mul(ad.reshape(a, (2, 6)), Tensor(w.data.reshape(2, 6)))), a),
        ("op sum", lambda: ad.tensor_sum(a), a),
        ("op mean", lambda: ad.mean(a), a),
        ("op sum_axis", lambda: ad.tensor_sum(ad.mul(ad.sum_axis(a, 1), s)), a),
        ("op softmax_rows", lambda: ad.tensor_sum(ad.mul(ad.softmax_rows(a), w)), a),
        ("op logsumexp_rows", lambda: ad.tensor_sum(ad.mul(ad.logsumexp_rows(a), s)), a),
        ("op add_rowvec", lambda: ad.tensor_sum(ad.mul(ad.add_rowvec(a, v), w)), v),
        ("op scale_rows", lambda: ad.tensor_sum(ad.mul(ad.scale_rows(a, s), w)), s),
        ("op select_col", lambda: ad.tensor_sum(ad.mul(ad.select_col(a, 1), s)), a),
        ("op take", lambda: ad.take(v, 2), v),
        ("op stack_cols", lambda: ad.tensor_sum(ad.mul(ad.stack_cols([s, ad.mul(s, s)]), w2)), s),
        ("op diag_part", lambda: ad.tensor_sum(ad.diag_part(psd)), psd),
        ("op symmetrize", lambda: ad.tensor_sum(ad.mul(ad.symmetrize(psd), Tensor(m))), psd),
        ("op matrix_inverse_psd", lambda: ad.tensor_sum(ad.matrix_inverse_psd(psd)), psd),
        ("op logdet_psd", lambda: ad.logdet_psd(psd), psd),
        ("op l2_norm_rows", lambda: ad.tensor_sum(ad.mul(ad.l2_norm_rows(a), s)), a),
        ("op l1_distance", lambda: ad.l1_distance(a, b), a),
        ("op l2_distance", lambda: ad.l2_distance(a, b), a),
    ]


def _loss_gradient_cases(rng):
    x = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    x_rec = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    z = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    z_rec = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    d_real = Tensor(rng.uniform(0.2, 0.8, (5, 1)), requires_grad=True)
    d_fake = Tensor(rng.uniform(0.2, 0.8, (5, 1)), requires_grad=True)
    weights = ls.LossWeights()

    def composed():
        return ls.total_generator_loss(
            ls.image_reconstruction_loss(x, x_rec),
            ls.adversarial_losses(d_real, d_fake)[1],
            ls.latent_representation_loss(z, z_rec),
            ad.mean(z),  # cheap differentiable stand-in for the mixture term
            weights,
        )

    return [
        ("loss image reconstruction", lambda: ls.image_reconstruction_loss(x, x_rec), x_rec),
        ("loss latent distance", lambda: ls.latent_representation_loss(z, z_rec), z_rec),
        ("loss adversarial (disc)", lambda: ls.adversarial_losses(d_real, d_fake)[0], d_real),
        ("loss adversarial (gen)", lambda: ls.adversarial_losses(d_real, d_fake)[1], d_fake),
        ("loss weighted composition", composed, x),
    ]


def gradient_checks(seed: int = 0, instances: int = INSTANCES) -> list[CheckResult]:
    results: dict[str, float] = {}
    for trial in range(instances):
        rng = np.random.default_rng(seed * 1000 + trial)
        for name, f, wrt in _op_gradient_cases(rng) + _loss_gradient_cases(rng):
            err = ad.gradient_check(f, wrt)
            results[name] = max(results.get(name, 0.0), err)

        z = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        g = rng.uniform(0.05, 1.0, size=(5, 2))
        gamma = Tensor(g / g.sum(axis=1, keepdims=True), requires_grad=True)

        def mixture_loss():
            params = mx.estimate_gmm(z, gamma, eps=1e-3)
            return mx.estimation_loss(z, gamma, params, 0.1, 0.005)

        for name, wrt in (("mixture loss d/dz", z), ("mixture loss d/dgamma", gamma)):
            err = ad.gradient_check(mixture_loss, wrt)
            results[name] = max(results.get(name, 0.0), err)

    out = []
    for name, err in results.items():
        tol = GRAD_TOL_MIXTURE if name.startswith("mixture") else GRAD_TOL
        out.append(CheckResult(name, tol, err))
    return out


def full_pipeline_gradient_check(seed: int = 0) -> CheckResult:
    """Finite differences through the whole generator objective, network
    parameters included, on a small model and batch."""
    arch = nets.ArchConfig(
        input_dim=16, latent_dim=2, n_components=2,
        encoder_widths=(6,), discriminator_widths=(5,), estimator_widths=(4,),
    )
    model = nets.init_model(arch, seed)
    rng = np.random.default_rng(seed + 999)
    x = Tensor(rng.standard_normal((5, 16)))
    weights = ls.LossWeights()

    def total():
        z = nets.encode(model, x)
        x_rec = nets.decode(model, z)
        z_rec = nets.encode_aux(model, x_rec)
        gamma = nets.membership(model, z)
        params = mx.estimate_gmm(z, gamma, eps=1e-3)
        d_real = nets.discriminate(model, x)
        d_fake = nets.discriminate(model, x_rec)
        return ls.total_generator_loss(
            ls.image_reconstruction_loss(x, x_rec),
            ls.adversarial_losses(d_real, d_fake)[1],
            ls.latent_representation_loss(z, z_rec),
            mx.estimation_loss(z, gamma, params, 0.1, 0.005),
            weights,
        )

    max_err = 0.0
    probe = [model.encoder.weights[0], model.decoder.biases[0],
             model.aux_encoder.weights[-1], model.estimator.weights[0]]
    for p in probe:
        max_err = max(max_err, ad.gradient_check(total, p))
    return CheckResult("full objective d/dparams", GRAD_TOL_MIXTURE, max_err)


def mixture_cross_checks(seed: int = 0, instances: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed + 17)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 51))
        d = int(rng.integers(1, 5))
        k = int(rng.integers(1, 5))
        g = rng.uniform(0.05, 1.0, size=(n, k))
        report = mx.cross_check_estimation(
            rng.standard_normal((n, d)), g / g.sum(axis=1, keepdims=True)
        )
        worst = max(worst, report.max_weight_diff, report.max_mean_diff, report.max_cov_diff)
    return CheckResult("mixture statistics vs EM M-step", CROSS_CHECK_TOL, worst)


def energy_oracle_checks(seed: int = 0, instances: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed + 29)
    worst = 0.0
    for _ in range(instances):
        k = int(rng.integers(1, 4))
        d = int(rng.integers(1, 4))
        alpha = rng.uniform(0.2, 1.0, size=k)
        alpha /= alpha.sum()
        means = rng.uniform(-2, 2, size=(k, d))
        covs = np.empty((k, d, d))
        for j in range(k):
            m = rng.standard_normal((d, d))
            covs[j] = m @ m.T + 0.5 * np.eye(d)
        params = mx.GmmParams.from_arrays(alpha, means, covs)
        z = rng.uniform(-3, 3, size=d)
        got = mx.energy(Tensor(z), params).item()
        # naive density: plain determinant and inverse, no log-sum-exp
        density = 0.0
        for j in range(k):
            diff = z - means[j]
            quad = diff @ np.linalg.inv(covs[j]) @ diff
            density += alpha[j] * np.exp(-0.5 * quad) / np.sqrt(np.linalg.det(2.0 * np.pi * covs[j]))
        worst = max(worst, abs(got - (-np.log(density))))
    return CheckResult("energy vs naive mixture density", ENERGY_TOL, worst)


def run_all(seed: int = 0) -> VerifyReport:
    checks = gradient_checks(seed)
    checks.append(full_pipeline_gradient_check(seed))
    checks.append(mixture_cross_checks(seed))
    checks.append(energy_oracle_checks(seed))
    return VerifyReport(checks=checks)
