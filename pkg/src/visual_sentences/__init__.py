"""In-context visual sentences with a LoRA-tuned diffusion transformer."""
