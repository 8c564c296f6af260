"""The four training objectives and their weighted composition.

The generator side minimizes

    w_image * image_loss + w_adversarial * adversarial_generator_loss
    + w_latent * latent_loss + w_estimation * estimation_loss

while the discriminator minimizes its own binary cross-entropy in a
separate step: a single minimax expression cannot be minimized by one
party, so the two sides train on their own objectives.  The generator
term is the non-saturating form -mean(log D(reconstruction)); the
literal "minimize log(1 - D(...))" variant has vanishing gradients
exactly when the generator is worst.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Relative weight of each generator-side objective."""

    w_image: float = 1.0
    w_adversarial: float = 5.0
    w_latent: float = 1.0
    w_estimation: float = 0.05


@dataclass
class LossBreakdown:
    """One training step's loss values, as logged to the metrics CSV."""

    image_reconstruction: float
    adversarial_generator: float
    adversarial_discriminator: float
    latent_reconstruction: float
    estimation: float
    total: float

    def composed(self, weights: LossWeights) -> float:
        """Recompute the generator total from the parts."""
        return (
            weights.w_image * self.image_reconstruction
            + weights.w_adversarial * self.adversarial_generator
            + weights.w_latent * self.latent_reconstruction
            + weights.w_estimation * self.estimation
        )


def image_reconstruction_loss(x: Tensor, x_rec: Tensor) -> Tensor:
    """Mean per-sample L1 distance between input and reconstruction."""
    return ad.l1_distance(x, x_rec)


def latent_representation_loss(z: Tensor, z_rec: Tensor) -> Tensor:
    """Mean per-sample Euclidean distance between latent and re-encoded latent."""
    return ad.l2_distance(z, z_rec)


def adversarial_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) from D's probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7] so both losses stay
    finite for saturated discriminator outputs.
    """
    real = ad.clip(d_real, PROB_CLAMP, 1.0 - PROB_CLAMP)
    fake = ad.clip(d_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)
    disc = ad.neg(ad.add(ad.mean(ad.log(real)), ad.mean(ad.log(ad.sub(1.0, fake)))))
    gen = ad.neg(ad.mean(ad.log(fake)))
    return disc, gen


def total_generator_loss(
    image_loss: Tensor,
    adversarial_generator_loss: Tensor,
    latent_loss: Tensor,
    estimation_loss: Tensor,
    weights: LossWeights,
) -> Tensor:
    """Weighted sum of the four generator-side objectives."""
    return ad.add(
        ad.add(ad.mul(image_loss, weights.w_image),
               ad.mul(adversarial_generator_loss, weights.w_adversarial)),
        ad.add(ad.mul(latent_loss, weights.w_latent),
               ad.mul(estimation_loss, weights.w_estimation)),
    )
