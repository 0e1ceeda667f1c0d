"""optional tensorboard tracking"""

import os
from typing import Optional


class ScalarLogger:
    """Writes scalars to a TensorBoard directory, or drops them if no directory is set."""

    def __init__(self, log_dir: Optional[str]) -> None:
        self.writer = None
        if log_dir is not None:
            from compyute.nn.utils.tensorboard import SummaryWriter

            os.makedirs(log_dir, exist_ok=True)
            self.writer = SummaryWriter(log_dir=log_dir)

    def add_scalar(self, tag: str, value: float, step: int) -> None:
        if self.writer is not None:
            self.writer.add_scalar(tag, value, step)
