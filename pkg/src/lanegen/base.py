"""Minimal scikit-learn compatible estimator base.

Implements the ``get_params`` / ``set_params`` protocol by introspecting the
constructor signature, which is all that ``sklearn.clone`` and
``sklearn.pipeline.Pipeline`` need. We avoid a hard scikit-learn dependency;
composition with sklearn is protocol-based.
"""

from __future__ import annotations

import inspect


class ParamMixin:
    """get_params/set_params following sklearn conventions."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind in (p.POSITIONAL_OR_KEYWORD, p.KEYWORD_ONLY)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"Invalid parameter {key!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, key, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"
