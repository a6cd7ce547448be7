"""Small in-memory window sources for fast training tests."""
import numpy as np

from lvquant.data import NUM_FRAMES, WindowSet

# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


class SmallWindows:
    """WindowSet look-alike over block-averaged (downsampled) phantom frames."""

    def __init__(self, sequences, kappa, size=8):
        base = WindowSet(sequences, kappa)
        factor = 80 // size
        n = len(sequences)
        self.frames = base.frames.reshape(n, NUM_FRAMES, size, factor, size, factor).mean(axis=(3, 5))
        self.kappa = kappa
        self.labels = base.labels
        self.phase = base.phase
        self.window_spacing = base.window_spacing
        self._subject = base.subject_index
        self._index = base.frame_index

    def __len__(self):
        return len(self.labels)

    def inputs(self, rows):
        rows = np.asarray(rows)
        return self.frames[self._subject[rows][:, None], self._index[rows]]

    def batch(self, rows):
        rows = np.asarray(rows)
        return self.inputs(rows), self.labels[rows], self.phase[rows]
