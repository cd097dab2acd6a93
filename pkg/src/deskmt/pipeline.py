"""Experiment orchestration: one declarative config drives corpus loading,
lexicon training, optional bootstrapping, vocabulary or BPE artifacts,
per-seed training, single and ensemble translation, and evaluation reports.

Every stage writes its artifacts under the experiment directory and records
their hashes in a manifest; re-running an unchanged config reproduces every
output byte for byte, and `resume` skips stages whose outputs still match.
"""

from __future__ import annotations

import concurrent.futures
import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from . import __version__, bpe, corpus, decode, evaluation, lexicon, model, train

ENV_EXPERIMENT_ROOT = "DESKMT_EXPERIMENTS"

STAGES = ("lexicon", "bootstrap", "vocab", "train", "translate", "evaluate")


class ConfigError(ValueError):
    """Bad or inconsistent run configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (CLI exit code 3)."""


DEFAULT_CONFIG = {
    "data": {
        "train_source": "",
        "train_target": "",
        "dev_source": "",
        "dev_target": "",
        "test_source": "",
        "test_target": "",
    },
    "vocab": {"mode": "words", "limit": 50000, "bpe_operations": 32000, "map_singletons": True},
    "model": {"embed": 32, "hidden": 64, "attention": 64},
    "optimizer": {"kind": "adam", "rate": 0.0002},
    "anneal": {"max_runs": 1, "patience": 20, "eval_intervals": [50000, 25000]},
    "training": {"batch_budget": 512, "max_len": 100, "clip_norm": 5.0},
    "lexicon": {"iterations": 5, "min_prob": 0.0},
    "extensions": {
        "dropout": 0.0,
        "lexicon_bias": False,
        "lexicon_bias_epsilon": 1e-6,
        "bootstrap_max_added": 0,
        "phrase_max_len": 4,
    },
    "decode": {"beam": 5, "max_len_factor": 2, "max_len_offset": 5},
    "seeds": [1, 2, 3],
}

# "vanilla" is the full-word baseline trained with standard (single-run)
# Adam; "recommended" adds annealing restarts and a joint BPE vocabulary,
# and its three seeds are ensembled at decode time like every run.
PRESETS = {
    "vanilla": {
        "vocab": {"mode": "words", "limit": 50000},
        "optimizer": {"kind": "adam", "rate": 0.0002},
        "anneal": {"max_runs": 1, "patience": 20},
        "seeds": [1, 2, 3],
    },
    "recommended": {
        "vocab": {"mode": "bpe", "bpe_operations": 32000, "map_singletons": True},
        "optimizer": {"kind": "adam", "rate": 0.0002},
        "anneal": {"max_runs": 3, "patience": 20},
        "seeds": [1, 2, 3],
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        preset = data.pop("preset", None)
        merged = DEFAULT_CONFIG
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            merged = _deep_merge(merged, PRESETS[preset])
        merged = _deep_merge(merged, data)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def validate(self) -> None:
        data = self.raw
        if not data["seeds"]:
            raise ConfigError("seed list must not be empty")
        if data["vocab"]["mode"] not in ("words", "bpe"):
            raise ConfigError(f"unknown vocab mode {data['vocab']['mode']!r}")
        if data["optimizer"]["kind"] not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {data['optimizer']['kind']!r}")
        for key, path in data["data"].items():
            if not path:
                raise ConfigError(f"data.{key} is not set")
            if not Path(path).exists():
                raise ConfigError(f"data.{key}: no such file: {path}")

    def canonical_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def __getitem__(self, key):
        return self.raw[key]


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def resolve_experiment_dir(path) -> Path:
    """Resolve relative experiment paths against the env-var root, if set."""
    path = Path(path)
    root = os.environ.get(ENV_EXPERIMENT_ROOT)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


class Experiment:
    """Stage runner bound to one experiment directory and config."""

    def __init__(self, config: RunConfig, exp_dir, jobs: int = 1):
        self.config = config
        self.dir = Path(exp_dir)
        self.jobs = jobs
        self.manifest: dict = {
            "config_hash": config.config_hash(),
            "config": copy.deepcopy(config.raw),
            "version": __version__,
            "stages": {},
        }
        # loaded artifacts shared across stages
        self.train_corpus: corpus.ParallelCorpus | None = None
        self.dev_corpus: corpus.ParallelCorpus | None = None
        self.table = None
        self.reverse_table = None
        self.dictionary = None
        self.src_vocab = None
        self.tgt_vocab = None
        self.merges = None
        self.piece_vocab = None
        self.encoded_train = None
        self.encoded_dev = None

    # -- paths ---------------------------------------------------------------

    def path(self, *parts) -> Path:
        out = self.dir.joinpath(*parts)
        out.parent.mkdir(parents=True, exist_ok=True)
        return out

    def checkpoint_path(self, seed: int) -> Path:
        return self.path("checkpoints", f"seed{seed}.nmtb")

    def translation_path(self, label: str) -> Path:
        return self.path("translations", f"test.{label}.txt")

    # -- corpus loading (not a recorded stage: inputs live outside the dir) ---

    def load_corpora(self) -> None:
        data = self.config["data"]
        max_len = self.config["training"]["max_len"]
        self.train_corpus = corpus.load_parallel(
            data["train_source"], data["train_target"], max_len
        )
        self.dev_corpus = corpus.load_parallel(data["dev_source"], data["dev_target"], max_len)
        if not self.train_corpus.pairs:
            raise StageError("training corpus is empty after filtering")

    # -- stages ---------------------------------------------------------------

    def stage_lexicon(self) -> list[Path]:
        iterations = self.config["lexicon"]["iterations"]
        self.table = lexicon.learn_model1(self.train_corpus, iterations)
        swapped = corpus.ParallelCorpus([(t, s) for s, t in self.train_corpus.pairs])
        self.reverse_table = lexicon.learn_model1(swapped, iterations)
        self.dictionary = lexicon.extract_dictionary(
            self.table, self.config["lexicon"]["min_prob"]
        )
        table_path = self.path("lexicon", "table.src-tgt.tsv")
        reverse_path = self.path("lexicon", "table.tgt-src.tsv")
        dict_path = self.path("lexicon", "dictionary.tsv")
        self.table.save(table_path)
        self.reverse_table.save(reverse_path)
        self.dictionary.save(dict_path, self.table)
        return [table_path, reverse_path, dict_path]

    def load_lexicon(self) -> None:
        self.table = lexicon.TranslationTable.load(self.path("lexicon", "table.src-tgt.tsv"))
        self.reverse_table = lexicon.TranslationTable.load(
            self.path("lexicon", "table.tgt-src.tsv")
        )
        self.dictionary = lexicon.Dictionary.load(self.path("lexicon", "dictionary.tsv"))

    def _bootstrap_enabled(self) -> bool:
        return self.config["extensions"]["bootstrap_max_added"] > 0

    def stage_bootstrap(self) -> list[Path]:
        if not self._bootstrap_enabled():
            return []
        ext = self.config["extensions"]
        alignments = lexicon.align_corpus(self.train_corpus, self.table, self.reverse_table)
        phrases = lexicon.extract_corpus_phrases(
            self.train_corpus, alignments, ext["phrase_max_len"]
        )
        self.train_corpus = corpus.bootstrap_corpus(
            self.train_corpus, phrases, ext["bootstrap_max_added"]
        )
        src_path = self.path("corpus", "train.bootstrapped.src")
        tgt_path = self.path("corpus", "train.bootstrapped.tgt")
        with open(src_path, "w", encoding="utf-8") as sfh, open(
            tgt_path, "w", encoding="utf-8"
        ) as tfh:
            for src, tgt in self.train_corpus.pairs:
                sfh.write(" ".join(src) + "\n")
                tfh.write(" ".join(tgt) + "\n")
        return [src_path, tgt_path]

    def load_bootstrap(self) -> None:
        if not self._bootstrap_enabled():
            return
        self.train_corpus = corpus.load_parallel(
            self.path("corpus", "train.bootstrapped.src"),
            self.path("corpus", "train.bootstrapped.tgt"),
            max_len=10**9,
        )

    def stage_vocab(self) -> list[Path]:
        mode = self.config["vocab"]["mode"]
        outputs = []
        if mode == "bpe":
            word_freqs = bpe.joint_word_frequencies(self.train_corpus)
            self.merges = bpe.learn_merges(word_freqs, self.config["vocab"]["bpe_operations"])
            self.piece_vocab = bpe.build_piece_vocab(self.train_corpus, self.merges)
            merges_path = self.path("bpe", "merges.txt")
            pieces_path = self.path("bpe", "pieces.tsv")
            self.merges.save(merges_path)
            self.piece_vocab.save(pieces_path)
            outputs += [merges_path, pieces_path]
            map_singletons = self.config["vocab"]["map_singletons"]
            train_encoded = bpe.encode_corpus(
                self.train_corpus, self.merges, self.piece_vocab, map_singletons
            )
            dev_encoded = bpe.encode_corpus(
                self.dev_corpus, self.merges, self.piece_vocab, map_singletons
            )
            limit = 10**9  # pieces are bounded by the merge count, keep them all
            self.src_vocab = corpus.build_vocab(train_encoded, "source", limit)
            self.tgt_vocab = corpus.build_vocab(train_encoded, "target", limit)
            self._encode_with_vocabs(train_encoded, dev_encoded)
        else:
            limit = self.config["vocab"]["limit"]
            self.src_vocab = corpus.build_vocab(self.train_corpus, "source", limit)
            self.tgt_vocab = corpus.build_vocab(self.train_corpus, "target", limit)
            self._encode_with_vocabs(self.train_corpus, self.dev_corpus)
        src_path = self.path("vocab", "src.vocab")
        tgt_path = self.path("vocab", "tgt.vocab")
        self.src_vocab.save(src_path)
        self.tgt_vocab.save(tgt_path)
        return outputs + [src_path, tgt_path]

    def _encode_with_vocabs(self, train_tokens, dev_tokens) -> None:
        self.encoded_train = [
            (self.src_vocab.encode(s), self.tgt_vocab.encode(t)) for s, t in train_tokens.pairs
        ]
        self.encoded_dev = [
            (self.src_vocab.encode(s), self.tgt_vocab.encode(t)) for s, t in dev_tokens.pairs
        ]

    def load_vocab(self) -> None:
        if self.config["vocab"]["mode"] == "bpe":
            self.merges = bpe.MergeTable.load(self.path("bpe", "merges.txt"))
            self.piece_vocab = bpe.PieceVocab.load(self.path("bpe", "pieces.tsv"))
        self.src_vocab = corpus.Vocabulary.load(self.path("vocab", "src.vocab"))
        self.tgt_vocab = corpus.Vocabulary.load(self.path("vocab", "tgt.vocab"))
        if self.config["vocab"]["mode"] == "bpe":
            map_singletons = self.config["vocab"]["map_singletons"]
            train_encoded = bpe.encode_corpus(
                self.train_corpus, self.merges, self.piece_vocab, map_singletons
            )
            dev_encoded = bpe.encode_corpus(
                self.dev_corpus, self.merges, self.piece_vocab, map_singletons
            )
            self._encode_with_vocabs(train_encoded, dev_encoded)
        else:
            self._encode_with_vocabs(self.train_corpus, self.dev_corpus)

    def _model_config(self, seed: int) -> model.ModelConfig:
        mcfg = self.config["model"]
        ext = self.config["extensions"]
        bias = None
        if ext["lexicon_bias"]:
            bias = model.make_lexicon_bias(
                self.table, self.src_vocab, self.tgt_vocab, ext["lexicon_bias_epsilon"]
            )
        return model.ModelConfig(
            src_vocab_size=len(self.src_vocab),
            tgt_vocab_size=len(self.tgt_vocab),
            embed_size=mcfg["embed"],
            hidden_size=mcfg["hidden"],
            attention_size=mcfg["attention"],
            dropout=ext["dropout"],
            lexicon_bias=bias,
            seed=seed,
        )

    def _train_one(self, seed: int) -> list[Path]:
        anneal = train.AnnealConfig(
            max_runs=self.config["anneal"]["max_runs"],
            patience=self.config["anneal"]["patience"],
            eval_intervals=tuple(self.config["anneal"]["eval_intervals"]),
        )
        best, log = train.train_run(
            self.encoded_train,
            self.encoded_dev,
            self._model_config(seed),
            self.config["optimizer"]["kind"],
            anneal,
            seed=seed,
            rate=self.config["optimizer"]["rate"],
            batch_budget=self.config["training"]["batch_budget"],
            clip_norm=self.config["training"]["clip_norm"],
        )
        ckpt = self.checkpoint_path(seed)
        model.save_checkpoint(
            ckpt,
            best,
            extra={
                "src_vocab_hash": file_hash(self.path("vocab", "src.vocab")),
                "tgt_vocab_hash": file_hash(self.path("vocab", "tgt.vocab")),
                "config_hash": self.config.config_hash(),
                "train_seed": str(seed),
            },
        )
        log.save(self.path("logs", f"train.seed{seed}.tsv"))
        return [ckpt, Path(f"{ckpt}.meta")]

    def stage_train(self) -> list[Path]:
        seeds = self.config["seeds"]
        outputs: list[Path] = []
        if self.jobs > 1 and len(seeds) > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=self.jobs) as pool:
                for paths in pool.map(_train_seed_job, [(self, seed) for seed in seeds]):
                    outputs.extend(paths)
        else:
            for seed in seeds:
                outputs.extend(self._train_one(seed))
        return outputs

    def _members(self, seeds) -> list[decode.EnsembleMember]:
        bias = None
        if self.config["extensions"]["lexicon_bias"]:
            bias = model.make_lexicon_bias(
                self.table,
                self.src_vocab,
                self.tgt_vocab,
                self.config["extensions"]["lexicon_bias_epsilon"],
            )
        members = []
        for seed in seeds:
            params, meta = model.load_checkpoint(self.checkpoint_path(seed), bias)
            members.append(
                decode.EnsembleMember(params, meta.get("tgt_vocab_hash", ""), f"seed{seed}")
            )
        return members

    def _bpe_artifacts(self) -> decode.BpeArtifacts | None:
        if self.config["vocab"]["mode"] != "bpe":
            return None
        return decode.BpeArtifacts(
            self.merges, self.piece_vocab, self.config["vocab"]["map_singletons"]
        )

    def stage_translate(self) -> list[Path]:
        seeds = self.config["seeds"]
        members = self._members(seeds)
        dec = self.config["decode"]
        outputs = []
        systems = [(f"seed{seed}", [member]) for seed, member in zip(seeds, members)]
        systems.append(("ensemble", members))
        for label, group in systems:
            out = self.translation_path(label)
            decode.translate_corpus(
                decode.EnsembleSpec(group),
                self.config["data"]["test_source"],
                out,
                self.src_vocab,
                self.tgt_vocab,
                bpe=self._bpe_artifacts(),
                dictionary=self.dictionary,
                beam_size=dec["beam"],
            )
            outputs.append(out)
        return outputs

    def stage_evaluate(self) -> list[Path]:
        data = self.config["data"]
        with open(data["test_target"], encoding="utf-8") as fh:
            references = [line.rstrip("\n") for line in fh]
        with open(data["test_source"], encoding="utf-8") as fh:
            sources = [line.rstrip("\n") for line in fh]

        bleu_rows = []
        seed_scores = []
        for seed in self.config["seeds"]:
            with open(self.translation_path(f"seed{seed}"), encoding="utf-8") as fh:
                hyp = [line.rstrip("\n") for line in fh]
            score = evaluation.bleu(hyp, references)
            bleu_rows.append((f"seed{seed}", score))
            seed_scores.append(score.score)
        with open(self.translation_path("ensemble"), encoding="utf-8") as fh:
            ensemble_hyp = [line.rstrip("\n") for line in fh]
        ensemble_bleu = evaluation.bleu(ensemble_hyp, references)
        bleu_rows.append(("+Ensemble", ensemble_bleu))
        mean, per_run = evaluation.average_runs(seed_scores)

        # class analysis always contrasts a full-word cut with a merge table,
        # so build whichever artifact this run's mode does not produce
        full_vocab = (
            self.tgt_vocab
            if self.config["vocab"]["mode"] == "words"
            else corpus.build_vocab(self.train_corpus, "target", self.config["vocab"]["limit"])
        )
        merges = (
            self.merges
            if self.merges is not None
            else bpe.learn_merges(
                bpe.joint_word_frequencies(self.train_corpus),
                self.config["vocab"]["bpe_operations"],
            )
        )
        report = evaluation.classwise_f1(
            ensemble_hyp, references, sources, full_vocab, merges, self.dictionary
        )
        curve, covered = evaluation.vocab_coverage(
            self.train_corpus.side("source"), self.config["vocab"]["limit"]
        )
        sections = {
            "bleu": bleu_rows,
            "averages": {"single_mean": mean, "single_runs": per_run, "coverage_at_limit": covered},
            "class_f1": report,
            "coverage": curve[:1000],
        }
        json_path = self.path("reports", "report.json")
        tsv_path = self.path("reports", "report.tsv")
        json_path.write_text(evaluation.report_to_json(sections), encoding="utf-8")
        tsv_path.write_text(evaluation.render_report_tsv(sections), encoding="utf-8")
        return [json_path, tsv_path]

    # -- orchestration ---------------------------------------------------------

    _RUNNERS = {
        "lexicon": (stage_lexicon, load_lexicon),
        "bootstrap": (stage_bootstrap, load_bootstrap),
        "vocab": (stage_vocab, load_vocab),
        "train": (stage_train, None),
        "translate": (stage_translate, None),
        "evaluate": (stage_evaluate, None),
    }

    def _record(self, stage: str, outputs: list[Path]) -> None:
        self.manifest["stages"][stage] = {
            str(path.relative_to(self.dir)): file_hash(path) for path in outputs
        }

    def _stage_clean(self, stage: str, manifest: dict) -> bool:
        recorded = manifest.get("stages", {}).get(stage)
        if recorded is None:
            return False
        for rel, digest in recorded.items():
            path = self.dir / rel
            if not path.exists() or file_hash(path) != digest:
                return False
        return True

    def _write_manifest(self) -> None:
        path = self.path("manifest.json")
        path.write_text(
            json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def run(self, skip_through: dict | None = None) -> Path:
        """Execute all stages; with `skip_through` (a prior manifest), reuse
        every leading stage whose recorded outputs still hash-match."""
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(self.config.canonical_json(), encoding="utf-8")
        self.load_corpora()
        skipping = skip_through is not None
        for stage in STAGES:
            runner, loader = self._RUNNERS[stage]
            if skipping and self._stage_clean(stage, skip_through):
                if loader is not None:
                    loader(self)
                self.manifest["stages"][stage] = skip_through["stages"][stage]
                continue
            skipping = False  # first dirty stage invalidates the rest
            try:
                outputs = runner(self)
            except (ConfigError, StageError):
                self._write_manifest()
                raise
            except Exception as exc:
                self._write_manifest()
                raise StageError(f"stage {stage!r} failed: {exc}") from exc
            self._record(stage, outputs)
        self._write_manifest()
        return self.dir


def _train_seed_job(args):
    experiment, seed = args
    return experiment._train_one(seed)


def run_experiment(config: RunConfig, exp_dir, jobs: int = 1) -> Path:
    """Run the full pipeline into `exp_dir`."""
    return Experiment(config, exp_dir, jobs).run()


def resume(exp_dir, jobs: int = 1) -> Path:
    """Re-run an experiment directory, skipping stages whose outputs are intact.

    Refuses to resume when the stored config no longer matches the manifest,
    reporting the differing keys.
    """
    exp_dir = Path(exp_dir)
    manifest_path = exp_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{exp_dir}: no manifest.json; nothing to resume")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    config = RunConfig.load(exp_dir / "config.json")
    if config.config_hash() != manifest.get("config_hash"):
        diff = _config_diff(manifest.get("config", {}), config.raw)
        raise ConfigError(
            "config.json no longer matches the manifest; differing keys:\n"
            + diff
            + "\n  edit the config back or start a fresh experiment directory"
        )
    return Experiment(config, exp_dir, jobs).run(skip_through=manifest)


def _config_diff(old: dict, new: dict, prefix: str = "") -> str:
    lines = []
    for key in sorted(set(old) | set(new)):
        dotted = f"{prefix}{key}"
        if key not in old:
            lines.append(f"  + {dotted} = {new[key]!r}")
        elif key not in new:
            lines.append(f"  - {dotted} = {old[key]!r}")
        elif isinstance(old[key], dict) and isinstance(new[key], dict):
            nested = _config_diff(old[key], new[key], f"{dotted}.")
            if nested:
                lines.append(nested)
        elif old[key] != new[key]:
            lines.append(f"  ~ {dotted}: {old[key]!r} -> {new[key]!r}")
    return "\n".join(lines)
