"""scikit-learn compatible wrapper around the federated simulator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, partition
from .federation import FederationConfig, build_clients, init_server, run_federation
from .nn import EncoderSpec, Network


class FederatedLabelSetClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Classifier trained by simulating a federation of label-restricted clients.

    ``fit`` splits ``(X, y)`` into ``n_clients`` clients holding
    ``labels_per_client`` random labels each (plus an unlabeled server pool
    for the tuning methods) and runs ``rounds`` communication rounds. The
    kept model is the snapshot with the best federated validation accuracy.
    ``transform`` returns the learned representation.

    Parameters mirror the experiment configuration; ``encoder`` is ``"mlp"``
    (widths ``hidden``) or ``"cnn"`` (inputs shaped ``(N, C, H, W)``).
    """

    def __init__(
        self,
        method="fedavg",
        label_mode="private",
        n_clients=10,
        labels_per_client=5,
        samples_per_client=2000,
        unlabeled_pool_size=0,
        rounds=100,
        local_epochs=1,
        batch_size=64,
        lr=1e-3,
        fedprox_mu=1e-2,
        fedrs_alpha=0.5,
        tuning_epochs=3,
        tuning_optimizer="adam",
        encoder="mlp",
        hidden=(64, 32),
        fc_width=64,
        random_state=0,
    ):
        self.method = method
        self.label_mode = label_mode
        self.n_clients = n_clients
        self.labels_per_client = labels_per_client
        self.samples_per_client = samples_per_client
        self.unlabeled_pool_size = unlabeled_pool_size
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.fedprox_mu = fedprox_mu
        self.fedrs_alpha = fedrs_alpha
        self.tuning_epochs = tuning_epochs
        self.tuning_optimizer = tuning_optimizer
        self.encoder = encoder
        self.hidden = hidden
        self.fc_width = fc_width
        self.random_state = random_state

    def _validate(self, X, y=None):
        nd = self.encoder == "cnn"
        if y is None:
            return check_array(X, allow_nd=nd, dtype=np.float64)
        return check_X_y(X, y, allow_nd=nd, dtype=np.float64)

    def fit(self, X, y, eval_set=None):
        """Run the federation. ``eval_set=(X_test, y_test)`` adds per-round test accuracy to ``history_``."""
        X, y = self._validate(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        n_labels = len(self.classes_)
        seed = int(self.random_state)
        config = FederationConfig(
            method=self.method, label_mode=self.label_mode, rounds=self.rounds, local_epochs=self.local_epochs,
            batch_size=self.batch_size, lr=self.lr, fedprox_mu=self.fedprox_mu, fedrs_alpha=self.fedrs_alpha,
            tuning_epochs=self.tuning_epochs, tuning_optimizer=self.tuning_optimizer, seed=seed,
        )
        data = Dataset(X, y_enc)
        pool_size = self.unlabeled_pool_size if config.tuning_loss else 0
        plan = partition(data, self.n_clients, self.labels_per_client, self.samples_per_client, pool_size,
                         np.random.default_rng(seed), n_labels=n_labels)
        if self.encoder == "mlp":
            spec = EncoderSpec("mlp", (X.shape[1],), tuple(self.hidden))
        else:
            spec = EncoderSpec("cnn", tuple(X.shape[1:]), fc_width=self.fc_width)
        self.network_ = Network(spec)
        test = None
        if eval_set is not None:
            X_test, y_test = self._validate(*eval_set)
            test = Dataset(X_test, np.searchsorted(self.classes_, y_test))
        server = init_server(self.network_, plan.label_sets, n_labels, seed, pool=X[plan.pool_indices] if pool_size else None)
        best = {"val": -np.inf, "params": server.params}

        def keep_best(state, record):
            if record.val_accuracy > best["val"]:
                best["val"], best["params"] = record.val_accuracy, state.params

        result = run_federation(self.network_, server, build_clients(data, plan), config, test, on_round=keep_best)
        self.params_ = best["params"]
        self.label_sets_ = [tuple(self.classes_[list(ls.global_labels)]) for ls in plan.label_sets]
        self.history_ = result.history
        self.best_round_ = result.best_round
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return self.network_.predict_proba(self.params_, self._validate(X))

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        check_is_fitted(self, "params_")
        return self.network_.encode(self.params_, self._validate(X))
