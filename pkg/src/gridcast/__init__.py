"""Grid-series forecasting with masked-reconstruction pre-training and
memory-pool prompts.

The package is organised by pipeline stage:

- ``data``        loading, synthetic families, splits, normalization, windows
- ``patching``    voxel-block tokenisation and positional encodings
- ``masking``     the four masking strategies
- ``nn``          numpy layers with explicit backward passes
- ``backbone``    transformer encoder/decoder over patch tokens
- ``prompt``      knowledge extraction networks and key-value memory pools
- ``model``       full forecaster tying the above together
- ``training``    pre-training, prompt tuning, checkpoints
- ``evaluation``  metrics, baselines, protocols, noise suite
- ``cli``         command-line entry points
"""

__version__ = "0.1.0"
