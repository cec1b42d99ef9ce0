"""DeformableFormer: a MetaFormer whose token mixer is a deformable convolution.

Everything is plain numpy with hand-written backward passes.
"""

__version__ = "0.1.0"
