"""Small 3-d segmentation network used to exercise the export path.

Untrained weights are fine for integration tests: the exporter only needs a
model with a named encoder, a logit head, and an optional dropout site.
"""

import torch
from torch import nn

__all__ = ["ToySegNet", "toy_model"]


class ToySegNet(nn.Module):
    """Two conv blocks, a dropout site, and a 1x1 logit head.

    The encoder is an nn.Sequential so its activation sites have stable
    dotted names ("encoder.0" .. "encoder.3"); "encoder.3" is the ReLU at
    the end of the encoder and is the intended feature tap.
    """

    def __init__(self, width: int = 4, n_classes: int = 2, dropout: float = 0.0,
                 logit_base: float = -5.0):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv3d(1, width, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv3d(width, 2 * width, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.drop = nn.Dropout3d(dropout)
        self.head = nn.Conv3d(2 * width, n_classes, kernel_size=1)
        # park logits in the negative band a log-probability head would
        # occupy; energy scoring needs logsumexp(logits) < 0 on clean data
        nn.init.constant_(self.head.bias, logit_base)

    def forward(self, x):
        return self.head(self.drop(self.encoder(x)))


def toy_model(seed: int = 0, width: int = 4, n_classes: int = 2,
              dropout: float = 0.0, logit_base: float = -5.0) -> ToySegNet:
    """Deterministically initialised ToySegNet in eval mode."""
    torch.manual_seed(seed)
    model = ToySegNet(width=width, n_classes=n_classes, dropout=dropout,
                      logit_base=logit_base)
    model.eval()
    return model
