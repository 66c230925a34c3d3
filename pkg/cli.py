#!/usr/bin/env python3
"""
Decomposed SVS - CLI

Text and a melody in, singing out, one stage at a time.

Commands:
  corpus-gen        - Render a synthetic multi-singer corpus
  extract           - F0/VUV/loudness/mel/HLF/embeddings for every utterance
  flatten-midi      - Rebuild note tracks (score fusion or quantizer)
  train-linguistic  - Fit the label -> HLF model
  train-pitch       - Fit the MIDI + HLF -> pitch/loudness model
  train-synth       - Fit the diffusion mel generator
  synth             - Label + MIDI + singer -> wav
  resynth           - Wav -> conditioner -> wav
  inpaint           - Replace lyrics in a recording via an edit script
  eval              - MCD / F0 RMSE / F0 CORR / CER-WER report
"""

import argparse
import logging
import sys

from config import load_config
from errors import SVSError
from pipeline import COMMANDS, RunFlags, run

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_ERROR = 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument('--config', help='YAML config (default: $DSVS_CONFIG, then dsvs.yaml)')
    p.add_argument('--seed', type=int, help='Override every seed in the config')
    p.add_argument('--out', help='Output directory (default depends on the command)')
    p.add_argument('-v', '--verbose', action='store_true', help='Debug logging')


def _source(p: argparse.ArgumentParser) -> None:
    p.add_argument('--utt', help='Utterance id from the corpus manifest')
    p.add_argument('--wav', help='Input recording (instead of --utt)')
    p.add_argument('--midi', help='Score MIDI TSV (frame_index<TAB>note)')
    p.add_argument('--singer', help='Target singer id from singers.json')
    p.add_argument('--steps', type=int, help='Diffusion sampling steps (default: all)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='dsvs',
        description='Decomposed singing voice synthesis: HLFs, pitch and diffusion in stages.',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Build a toy corpus and its features
  dsvs corpus-gen --seed 7
  dsvs extract --jobs 4

  # Train the three models
  dsvs train-linguistic
  dsvs train-pitch
  dsvs train-synth

  # Sing a corpus utterance in another singer's voice and key
  dsvs synth --utt s00_u000 --singer singer01 --steps 50

  # Change the lyrics of frames 40-90
  dsvs inpaint --utt s00_u000 --edit-script edits/plan.tsv

  # Score generated audio against the corpus
  dsvs eval --gen-dir out
"""
    )
    subparsers = parser.add_subparsers(dest='command', help='Commands')

    p = subparsers.add_parser('corpus-gen', help='Render a synthetic corpus')
    _common(p)
    p.add_argument('--jobs', type=int, default=1, help='Parallel utterances')

    for name, help_text in (('extract', 'Extract features for every utterance'),
                            ('flatten-midi', 'Rebuild note tracks from stored F0')):
        p = subparsers.add_parser(name, help=help_text)
        _common(p)
        p.add_argument('--jobs', type=int, default=1, help='Parallel utterances')

    for name in ('train-linguistic', 'train-pitch', 'train-synth'):
        p = subparsers.add_parser(name, help=f'Train the {name[6:]} model')
        _common(p)
        p.add_argument('--init', help='Checkpoint to continue from (fine-tuning)')

    p = subparsers.add_parser('synth', help='Label + MIDI + singer -> wav')
    _common(p)
    _source(p)
    p.add_argument('--label', help='Label TSV (phoneme<TAB>duration_frames)')

    p = subparsers.add_parser('resynth', help='Resynthesize a recording from its features')
    _common(p)
    _source(p)

    p = subparsers.add_parser('inpaint', help='Replace lyrics inside a recording')
    _common(p)
    _source(p)
    p.add_argument('--edit-script', help='TSV: start<TAB>end<TAB>KEEP|REPLACE<TAB>id')

    p = subparsers.add_parser('eval', help='Objective metrics report')
    _common(p)
    p.add_argument('--utt', help='Reference utterance id for --wav')
    p.add_argument('--wav', help='Generated recording')
    p.add_argument('--ref', help='Reference recording')
    p.add_argument('--gen-dir', help='Directory of generated <utt_id>.wav files')
    p.add_argument('--ref-text', help='Reference transcript')
    p.add_argument('--hyp-text', help='Recognized transcript')
    p.add_argument('--unit', choices=('char', 'word'), default='char',
                   help='Token unit for the error rate')
    return parser


def flags_from_args(args: argparse.Namespace) -> RunFlags:
    names = RunFlags.__dataclass_fields__
    values = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return RunFlags(**values)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command is None:
        parser.print_help()
        sys.exit(0)
    if args.command not in COMMANDS:
        print(f"Unknown command: {args.command}", file=sys.stderr)
        sys.exit(EXIT_USAGE)

    try:
        cfg = load_config(args.config)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else getattr(logging, cfg.logging.level.upper(),
                                                             logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        run(args.command, cfg, flags_from_args(args))
    except SVSError as e:
        print(f"[ERROR] {e.describe()}", file=sys.stderr)
        sys.exit(EXIT_ERROR)
    except OSError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        sys.exit(EXIT_ERROR)


if __name__ == '__main__':
    main()
