"""Prompt templating for interleaved image/text captioning models.

Each shot renders as an image sentinel followed by its caption and a chunk
terminator; the test image renders as a trailing open prompt the model
completes. The delimiter tokens vary between model releases, so they are
knobs on PromptTemplate rather than constants.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PromptTemplate:
    image_token: str = "<image>"
    prefix: str = "Output: "
    chunk_end: str = "<|endofchunk|>"

    def render(self, shots: list[tuple[str, str]]) -> str:
        """Render (image_id, caption) shots plus the open test slot.

        The image ids themselves never appear in the text; image payloads
        travel separately and interleave at each image token position.
        """
        parts = [f"{self.image_token}{self.prefix}{caption}{self.chunk_end}"
                 for _, caption in shots]
        parts.append(f"{self.image_token}{self.prefix.rstrip()}")
        return "".join(parts)


def render_prompt(shots: list[tuple[str, str]],
                  template: PromptTemplate | None = None) -> str:
    return (template or PromptTemplate()).render(shots)
