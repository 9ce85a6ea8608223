"""Local and global diffusion networks for video classification, in plain numpy.

Modules: ``tensor_core`` (dense kernels), ``autodiff`` (tape autodiff and
gradient checking), ``block`` (the diffusion block and its variants),
``backbone`` (LGD-2D / LGD-3D networks), ``sketch`` (tensor sketch and the
combination feature), ``synthdata`` (synthetic videos and samplers),
``training`` (two-stage optimisation and inference), ``config``,
``checkpoint``, ``gradcheck`` and ``cli``.
"""

__version__ = "0.1.0"
