"""Six-direction DTI metric estimation with a singular-value regularized loss.

Submodules: ``volume`` (containers and file formats), ``dti`` (tensor
model and metrics), ``phantom`` (synthetic data and Rician noise), ``svd``
(Jacobi SVD and truncation), ``quality`` (MSE/PSNR/SSIM), ``loss``,
``model`` and ``train`` (estimator and training), ``cli``.
"""
from .dti import compute_metrics, eig_symmetric3, fit_tensor_ols, predict_signal
from .errors import ConfigurationError, FormatError, TrainingDiverged, ValidationError
from .loss import LossBreakdown, adapt_lambda, svd_reg_loss, svd_reg_loss_grad
from .phantom import NoiseConfig, PhantomConfig, add_rician, generate_phantom, make_dataset
# The ``svd`` function is not re-exported here: it would shadow the submodule.
from .svd import SvdFactors, rank_sweep, sv_sensitivity, truncate
from .volume import (GradientTable, TensorField, Volume3D, load_gradient_table, load_volume,
                     save_volume, six_direction_table)

__version__ = "0.1.0"
