"""Dual-branch prompt-based multimodal machine translation, self-contained.

Modules: tensor (autodiff engine), nn (layers), model (multimodal
transformer), prompts (visual/language prompt machinery), diffusion (toy
conditional feature diffusion), bpe/vocabulary/batching/d2pf (data
pipeline), train/optim (consistency training), beam/bleu (decoding and
evaluation), checkpoint (persistence), cli (command surface).
"""

__version__ = "0.1.0"
