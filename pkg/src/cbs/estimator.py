"""scikit-learn style wrappers around the training engine."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .data import Dataset
from .models import build_mini_resnet, build_simple_cnn3
from .nn_ops import log_softmax
from .smoothing import SigmaSchedule, build_kernel, depthwise_blur
from .tensor import DTYPE
from .train import TrainConfig, mode_config, train_run


def check_images(X):
    """Validate an image batch and return it as float32 NCHW.

    Accepts ``[N, H, W]`` (single channel) or ``[N, C, H, W]``; rejects
    non-finite values and empty batches.
    """
    X = check_array(X, allow_nd=True, dtype=DTYPE, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W) or (N, C, H, W), got {X.shape}")
    return X


class CBSClassifier(ClassifierMixin, BaseEstimator):
    """CNN image classifier trained with an annealed Gaussian blur after convs.

    ``mode`` picks where smoothing goes (``full_cbs``, ``baseline``,
    ``image_only``, ``image_and_features``, ``constant_sigma``,
    ``single:<i>``). ``arch`` is ``simple3`` or ``resnet``.
    """

    def __init__(self, arch="simple3", mode="full_cbs", sigma0=1.0, decay=0.9, every=5,
                 granularity="epoch", channels=(32, 64, 128), blocks=3, width=16,
                 epochs=30, batch_size=64, lr=0.05, momentum=0.9, weight_decay=5e-4,
                 init="kaiming", random_state=0):
        self.arch = arch
        self.mode = mode
        self.sigma0 = sigma0
        self.decay = decay
        self.every = every
        self.granularity = granularity
        self.channels = channels
        self.blocks = blocks
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.init = init
        self.random_state = random_state

    def _smoothing(self):
        schedule = SigmaSchedule(self.sigma0, self.decay, self.every, self.granularity)
        return mode_config(self.mode, schedule)

    def _build(self, smoothing, c, size, k):
        if self.arch == "simple3":
            return build_simple_cnn3(c, size, k, smoothing, tuple(self.channels))
        if self.arch == "resnet":
            return build_mini_resnet(self.blocks, self.width, k, smoothing, c, size)
        raise ValueError(f"unknown arch {self.arch!r}")

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        if X.shape[2] != X.shape[3]:
            raise ValueError("images must be square")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        k = len(self.classes_)
        smoothing = self._smoothing()
        self.model_ = self._build(smoothing, X.shape[1], X.shape[2], k)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          momentum=self.momentum, weight_decay=self.weight_decay,
                          seed=int(self.random_state), smoothing=smoothing, init=self.init,
                          timing=False)
        self.history_ = train_run(self.model_, Dataset(X, y_enc, "fit", k), None, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        if X.shape[1:] != self.model_.input_shape:
            raise ValueError(f"expected images {self.model_.input_shape}, got {X.shape[1:]}")
        self.model_.eval()
        return self.model_.predict_logits(self.model_.preprocess(X))

    def predict_proba(self, X):
        return np.exp(log_softmax(self._logits(X).astype(np.float64)))

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]


class GaussianBlur(TransformerMixin, BaseEstimator):
    """Stateless per-channel Gaussian blur of image batches."""

    def __init__(self, sigma=1.0):
        self.sigma = sigma

    def fit(self, X, y=None):
        check_images(X)
        self.kernel_ = build_kernel(self.sigma)
        return self

    def transform(self, X):
        X = check_images(X)
        return depthwise_blur(X, build_kernel(self.sigma))
