"""Local volatility calibration for commodity futures options."""

from .amerconv import AmericanQuote, TreeConfig, american_implied_vol, americans_to_europeans
from .black import black_call_normalized, implied_vol
from .calibrate import (CalibResult, adjust_futures, calibrate_online, calibrate_with_futures, descend, misfit_R,
                        surface_error)
from .dupire import grad_J, observe, solve_dupire
from .errors import (CommodvolError, ConfigurationError, ConversionError, DataError, DescentError,
                     NumericalError)
from .grids import LocalVolSurface, Mesh, VolFamily, Window, build_mesh, eval_surface
from .parametric import Theta, eval_parametric, fit_parametric
from .quotes import QuoteSet
from .tikhonov import RegWeights

__version__ = "0.1.0"
