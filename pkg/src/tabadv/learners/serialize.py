"""Versioned JSON archive for fitted models.

Layout (``format`` = "tabadv-model", ``version`` = 1)::

    {"format": "tabadv-model", "version": 1, "type": "tree_ensemble"|"surrogate"|"autoencoder", ...}

Tree ensembles store one object per tree with parallel node arrays
(left, right, feature, threshold, value, weight). Networks store each
dense layer as nested lists plus its activation tag. Floats are written
with ``repr`` precision so a reload is bit-exact.
"""

import json

import numpy as np

from tabadv.learners.nn import AeNet, Dense, Scaler, SurrogateModel
from tabadv.learners.trees import Tree, TreeEnsemble

FORMAT = "tabadv-model"
VERSION = 1


def _dense(layer: Dense) -> dict:
    d = {"W": layer.W.tolist(), "b": layer.b.tolist(), "activation": layer.activation}
    if layer.slope is not None:
        d["slope"] = layer.slope.tolist()
    return d


def _undense(d: dict) -> Dense:
    return Dense(np.array(d["W"], dtype=float).reshape(len(d["W"]), -1), np.array(d["b"]),
                 d["activation"], None if "slope" not in d else np.array(d["slope"]))


def _scaler(s: Scaler) -> dict:
    return {"mean": s.mean.tolist(), "scale": s.scale.tolist()}


def to_dict(model) -> dict:
    head = {"format": FORMAT, "version": VERSION}
    if isinstance(model, TreeEnsemble):
        head.update(
            type="tree_ensemble",
            kind=model.kind,
            n_features=model.n_features,
            base_score=model.base_score,
            learning_rate=model.learning_rate,
            trees=[
                {k: getattr(t, k).tolist() for k in ("left", "right", "feature", "threshold", "value", "weight")}
                for t in model.trees
            ],
        )
    elif isinstance(model, SurrogateModel):
        head.update(
            type="surrogate",
            scaler=_scaler(model.scaler),
            embed=[_dense(x) for x in model.embed],
            head=[_dense(x) for x in model.head],
            dropout=model.dropout,
        )
    elif isinstance(model, AeNet):
        head.update(type="autoencoder", scaler=_scaler(model.scaler),
                    encoder=_dense(model.encoder), decoder=_dense(model.decoder))
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return head


def from_dict(d: dict):
    if d.get("format") != FORMAT:
        raise ValueError("not a tabadv model document")
    if d.get("version") != VERSION:
        raise ValueError(f"unsupported model format version {d.get('version')}")
    kind = d["type"]
    if kind == "tree_ensemble":
        trees = tuple(Tree(**t) for t in d["trees"])
        return TreeEnsemble(trees, d["kind"], d["n_features"], d["base_score"], d["learning_rate"])
    scaler = Scaler(np.array(d["scaler"]["mean"]), np.array(d["scaler"]["scale"]))
    if kind == "surrogate":
        return SurrogateModel(scaler, [_undense(x) for x in d["embed"]],
                              [_undense(x) for x in d["head"]], d["dropout"])
    if kind == "autoencoder":
        return AeNet(scaler, _undense(d["encoder"]), _undense(d["decoder"]))
    raise ValueError(f"unknown model type {kind!r}")


def dumps(model) -> str:
    return json.dumps(to_dict(model))


def loads(text: str):
    return from_dict(json.loads(text))
