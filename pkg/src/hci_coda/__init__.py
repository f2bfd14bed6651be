"""hci-coda: online self-supervised domain adaptation for high-content imaging.

A dual model (transformer feature extractor plus token classifier) is
pretrained with self-distillation on a labelled source, its classifier is
trained on the frozen extractor, and the extractor alone is then adapted
on unlabelled target images. Cross-batch consistency pairs images of the
same treatment from different batches so the extractor learns to ignore
batch effects.

Modules:
- dataset: manifest loading, hierarchy index, splits, image decoding
- synthetic: benchmark generator with controlled batch and source shifts
- views: multi-crop augmentation and cross-batch pair sampling
- models, objectives: transformer pieces and the distillation loss
- training: the three phases, test-time training, the transfer grid
- evaluation: metrics, CKA, embeddings, summaries and figures
- config, cli: YAML presets and the ``hci-coda`` command

Example:
    ```python
    from hci_coda.config import load_config
    from hci_coda.dataset import load_manifest

    config = load_config(overrides=["method=oda"])
    index = load_manifest("runs/desk/data/manifest.csv")
    ```
"""

from .exceptions import CodaError, IOFailure

__all__ = ["CodaError", "IOFailure", "__version__"]

__version__ = "0.1.0"
