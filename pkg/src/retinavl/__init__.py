"""Retinal vision-language toolkit.

Subpackages and modules:

* ``data`` -- dataset records, manifests, report segmentation, image
  preprocessing and augmentation.
* ``encoders`` -- tokenizer, vision/text transformer encoders, checkpoints.
* ``pretraining`` -- contrastive/alignment/demographic losses, LR schedule,
  EMA, and the training loop.
* ``zeroshot`` -- prompt ensembles, cosine classification, benchmark
  trimming, eye-level view fusion.
* ``localization`` -- text-guided similarity heatmaps, best-threshold
  segmentation scoring, per-region overlap, masking study.
* ``adaptation`` -- linear probing, fine-tuning, label subsampling,
  segmentation head training.
* ``metrics`` / ``stats`` -- evaluation metrics and statistical procedures.
* ``reader_study`` -- two-stage AI-assisted reading protocol, persistence,
  behavior taxonomy, aggregate analysis, and the HTTP service.
* ``cli`` -- command-line entry point wiring everything together.
"""

__version__ = "0.1.0"
