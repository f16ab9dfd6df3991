"""Object classifier: fused proposal features refined by Transformer layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hypergraph import ObjectProposal
from .layers import LinearLayer, Module, TransformerLayer
from .tensor import Parameter, Tensor


@dataclass
class ClassifierOutput:
    logits: Tensor
    labels: np.ndarray
    features: Tensor


class ObjectClassifier(Module):
    def __init__(
        self,
        n_classes: int,
        d_v: int,
        dim: int,
        heads: int,
        n_layers: int,
        ffn_hidden: int,
        emb_init: np.ndarray,
        rng: np.random.Generator,
    ):
        self.n_classes = n_classes
        d_emb = emb_init.shape[1]
        self.fc_o = LinearLayer(d_v + 9 + d_emb, dim, rng, "fc_o")
        self.emb_o = Parameter(emb_init.copy(), "emb_o")
        self.layers = [TransformerLayer(dim, heads, ffn_hidden, rng, f"layer{i}") for i in range(n_layers)]
        self.head = LinearLayer(dim, n_classes, rng, "head")

    def init_object_feature(self, visual, spatial, label_probs) -> Tensor:
        """relu(FC_o(v || p || Emb_o(c))), Emb_o being the probability-weighted embedding."""
        soft_emb = T.matmul(T.as_tensor(label_probs), self.emb_o)
        return T.relu(self.fc_o(T.concat([visual, spatial, soft_emb], axis=-1)))

    def __call__(self, visual, spatial, label_probs, valid: np.ndarray | None = None):
        """Returns (logits, final hidden states) for rows of one or more packed scenes."""
        x = self.init_object_feature(visual, spatial, label_probs)
        for layer in self.layers:
            x = layer(x, valid=valid)
        return self.head(x), x


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over foreground classes; background (column 0) never wins."""
    return np.argmax(logits[:, 1:], axis=1) + 1


def classify(model: ObjectClassifier, proposals: list[ObjectProposal]) -> ClassifierOutput:
    visual = np.stack([p.visual for p in proposals])
    spatial = np.stack([p.spatial for p in proposals])
    probs = np.stack([p.label_probs for p in proposals])
    logits, feats = model(visual, spatial, probs)
    return ClassifierOutput(logits, predict_labels(logits.data), feats)


def object_loss(logits, gt_categories) -> Tensor:
    return T.cross_entropy(logits, gt_categories)
