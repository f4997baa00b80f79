"""Bridge from image/text backbones to the ranking embedding file format.

Modules:
    backbone  - patch-token image encoders and text-token query encoders
    manifest  - line-delimited JSON manifest parsing
    writer    - standalone embedding-file writer (documented byte layout)
    export    - orchestration: encode, skip-report, write
    cli       - `embed-export export` entry point
"""

__version__ = "0.1.0"
