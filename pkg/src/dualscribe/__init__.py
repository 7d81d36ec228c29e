"""Joint verbatim transcription and subtitle generation, small enough to run on a desk.

The package is self-contained: a numpy-backed reverse-mode tensor library,
Conformer/Transformer building blocks, six multitask architectures, hybrid
CTC/attention training and joint beam-search decoding, plus the text, feature,
data and metric plumbing needed to run end-to-end experiments on synthetic or
real corpora.
"""

__version__ = "0.1.0"
