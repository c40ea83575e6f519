"""HOI detection toolkit: autodiff core, model, classifiers, matching, evaluation and CLI."""

__version__ = "0.1.0"
