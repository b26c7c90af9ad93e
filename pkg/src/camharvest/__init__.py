"""camharvest: build object-detection training sets from camera streams.

Harvests segmented video, subsamples frames, pseudo-labels them with a
built-in toy deformable-parts detector (or any external detector plugin),
exports a fine-tuning dataset, and certifies detector improvements with a
sampled, human-verified quality-control procedure.
"""

__version__ = "0.1.0"
