"""Image-conditioned BEGAN refiner: numpy backend, models, training and evaluation."""
from .backend import AdamState, Tensor, adam_step, backward
from .data import ImagePyramid, load_image_dir, make_pyramid, toy_dataset
from .losses import LossReport, LossWeights
from .models import DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator, forward
from .training import TrainConfig, TrainState, train, train_step

__version__ = "0.1.0"
