import torch

from visual_sentences.dit import ModelConfig, SentenceDiT


def jittered(config: ModelConfig | None = None, scale: float = 0.05, seed: int = 0) -> SentenceDiT:
    """Fresh model with every parameter nudged off its init.

    The zero-initialised gates and head make a fresh model output zeros and pass
    no gradient, which hides most behaviour a test wants to see.
    """
    model = SentenceDiT(config or ModelConfig(dim=32, heads=2, layers=2, seed=3))
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model
