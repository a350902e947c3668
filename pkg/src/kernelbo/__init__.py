"""Bayesian optimisation with kernels learned in a VAE latent space.

Submodules: ``grammar`` (kernel codes), ``gp`` (GP regression and EI), ``vae``
(KerVAE), ``search`` (KerGPR and baseline kernel searches), ``objectives``
(benchmarks, embeddings, oracles) and ``driver`` (outer loop and traces).
"""

from .driver import RunConfig, compare, fit_series, recover_kernel, run, run_fixed_kernel, \
    run_kobo, run_with_search
from .grammar import CompositeKernelSpec, KernelCode, decode, encode
from .kernels import Hyperparams

__all__ = ["RunConfig", "run", "run_kobo", "run_fixed_kernel", "run_with_search", "compare",
           "fit_series", "recover_kernel", "KernelCode", "CompositeKernelSpec", "encode",
           "decode", "Hyperparams"]
__version__ = "0.1.0"
