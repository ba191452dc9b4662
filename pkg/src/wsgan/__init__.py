"""Semi-supervised GAN image classification in four stages.

1. contrastive pretraining of an encoder (with a reconstruction decoder),
2. least-squares GAN training with FID-based generator selection,
3. classifier fine-tuning against the frozen best generator,
4. MixMatch-style pseudo-labeling over unlabeled and generated images.
"""

__version__ = "0.1.0"
