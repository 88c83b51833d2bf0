"""Direct probing of Wigner functions with a time-multiplexed photon-number-resolving detector."""

__version__ = "0.1.0"

from .calibration import (CalibrationReport, Estimate, displacement_magnitude,
                          estimate_bin_probs, klyshko_efficiency)
from .detector import (ClickStatistics, DetectorModel, convolution_matrix, forward,
                       loss_matrix)
from .displacement import (DisplacementSetting, OverlapFit, displaced_with_mismatch,
                           fit_overlap, poisson_vector)
from .errors import (ConfigError, DataError, MonteCarloRejectionError, NumericalError,
                     RankDeficientError, TruncationError)
from .fock import (ParityValue, PhotonStatistics, WignerPoint, displaced_fock_prob,
                   displaced_statistics, parity, wigner_point)
from .inversion import InversionResult, invert, monte_carlo_errors
from .tags import (GatingConfig, HeraldedHistogram, SourceConfig, TimeTagRecord, generate,
                   ingest)
