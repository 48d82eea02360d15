from .losses import (
    GENERATOR_TERMS,
    LossBreakdown,
    LossWeights,
    adversarial_losses,
    gram,
    perceptual_loss,
    pixel_loss,
    style_loss,
    total_loss,
    tv_loss,
)
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    IdentityFeatureExtractor,
    InpaintGenerator,
    LongShortAttention,
    PatchDiscriminator,
    RandomFeatureExtractor,
    assemble_generator_input,
    discriminate,
    discriminator_layer_specs,
    generate,
    receptive_field,
)

__all__ = [
    "GENERATOR_TERMS",
    "LossBreakdown",
    "LossWeights",
    "adversarial_losses",
    "gram",
    "perceptual_loss",
    "pixel_loss",
    "style_loss",
    "total_loss",
    "tv_loss",
    "DiscriminatorConfig",
    "GeneratorConfig",
    "IdentityFeatureExtractor",
    "InpaintGenerator",
    "LongShortAttention",
    "PatchDiscriminator",
    "RandomFeatureExtractor",
    "assemble_generator_input",
    "discriminate",
    "discriminator_layer_specs",
    "generate",
    "receptive_field",
]
