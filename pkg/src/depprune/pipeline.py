"""Pipeline stages.  Each stage reads its inputs from and writes its artifacts to one output directory."""

import json
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .depgraph import DependencyGroup, build_graph, discover_groups, group_param_delta
from .errors import DependencyError, DigestError
from .evaluation import AblationSettings, ablation_suite, evaluate
from .importance import (GroupScore, PrunePlan, accumulate_gradients, auto_protected_layers, make_calibration,
                         rank_and_select, score_groups)
from .model import init_model, tokenize, train_base
from .pruner import apply_plan, count_stats, validate_consistency
from .recovery import attach_lora, best_step, default_targets, merge_lora, train_lora

STAGES = ("train-base", "discover", "estimate", "plan", "prune", "recover", "eval", "ablate")

# artifact -> producing subcommand
PRODUCER = {
    "base.dprn": "train-base", "train_base.jsonl": "train-base",
    "groups.jsonl": "discover",
    "scores.jsonl": "estimate",
    "plan.json": "plan",
    "pruned.dprn": "prune", "prune_stats.json": "prune",
    "adapters.dprn": "recover", "merged.dprn": "recover", "recover_trace.jsonl": "recover",
    "eval.jsonl": "eval", "summary.txt": "eval",
    "ablation.jsonl": "ablate",
}


def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class Run:
    """A config bound to an output directory."""

    def __init__(self, cfg, out, log=None):
        self.cfg = cfg
        self.out = Path(out)
        self.digest = cfg.digest()
        self.model_digest = cfg.model_digest()
        self.log = log or (lambda msg: None)

    # -- artifact io
    def path(self, name):
        return self.out / name

    def require(self, name):
        p = self.path(name)
        if not p.exists():
            raise DependencyError(p, PRODUCER[name])
        return p

    def write_text(self, name, text):
        p = self.path(name)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(p)

    def write_jsonl(self, name, records):
        self.write_text(name, "".join(_dump(dict(r, digest=self.digest)) + "\n" for r in records))

    def read_jsonl(self, name):
        with open(self.require(name), encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(dict(obj, digest=self.digest), sort_keys=True, indent=1) + "\n")

    def read_json(self, name):
        return json.loads(self.require(name).read_text(encoding="utf-8"))

    def meta(self, kind):
        return {"digest": self.digest, "model_digest": self.model_digest, "kind": kind}

    def save_model(self, name, model, kind):
        checkpoint.save_checkpoint(model, self.path(name), self.meta(kind))

    def load_model(self, name):
        model, meta = checkpoint.load_checkpoint(self.require(name), with_meta=True)
        if meta.get("model_digest") != self.model_digest:
            raise DigestError(f"{name} was produced under model-config digest {meta.get('model_digest', '?')[:12]}, "
                              f"current config has {self.model_digest[:12]}")
        return model

    def tokens(self, split):
        return np.array(tokenize(self.cfg.corpus_bytes(split)), dtype=np.int64)

    # -- stages
    def train_base(self):
        c = self.cfg
        model = init_model(c.model_config(), seed=c["seed.init"])
        self.log(f"train-base: {c['train.steps']} steps")
        _, losses = train_base(model, self.tokens("base"), lr=c["train.lr"], steps=c["train.steps"],
                               batch=c["train.batch"], seq_len=c["train.seq_len"], seed=c["seed.data"],
                               optimizer=c["train.optimizer"])
        self.save_model("base.dprn", model, "base")
        self.write_jsonl("train_base.jsonl", ({"step": i + 1, "loss": v} for i, v in enumerate(losses)))
        return model

    def groups(self):
        return discover_groups(build_graph(self.cfg.model_config()), self.cfg["prune.unit"])

    def discover(self):
        groups = self.groups()
        self.log(f"discover: {len(groups)} {self.cfg['prune.unit']} groups")
        cfg = self.cfg.model_config()
        self.write_jsonl("groups.jsonl", (dict(g.to_record(), param_delta=group_param_delta(g, cfg)) for g in groups))
        return groups

    def _load_groups(self):
        return [DependencyGroup.from_record(r) for r in self.read_jsonl("groups.jsonl")]

    def calibration(self):
        c = self.cfg
        return make_calibration(self.tokens("calib"), c["prune.calib_n"], c["prune.calib_seq_len"], c["seed.data"])

    def estimate(self):
        c = self.cfg
        base = self.load_model("base.dprn")
        groups = self._load_groups()
        stats = None
        if c["prune.method"] not in ("L2", "Random"):
            stats = accumulate_gradients(base, self.calibration())
        scores = score_groups(base, groups, c["prune.method"], c["prune.aggregation"], stats, c["prune.fisher"],
                              c["seed.random"])
        self.write_jsonl("scores.jsonl", (s.to_record() for s in scores))
        return scores

    def plan(self):
        c = self.cfg
        base = self.load_model("base.dprn")
        groups = self._load_groups()
        scores = [GroupScore(r["group_id"], r["method"], r["aggregation"], r["score"])
                  for r in self.read_jsonl("scores.jsonl")]
        ratio = c["prune.ratio"]
        prot = c.protected_layers(None)
        if prot is None:
            prot = auto_protected_layers(groups, base, c["prune.unit"], ratio)
        plan = rank_and_select(groups, scores, ratio, prot, base, c["prune.unit"])
        self.log(f"plan: {len(plan.selected)} groups, predicted ratio {plan.achieved_ratio:.4f}")
        self.write_json("plan.json", plan.to_record())
        return plan

    def prune(self):
        base = self.load_model("base.dprn")
        plan = PrunePlan.from_record(self.read_json("plan.json"))
        pruned = apply_plan(base, plan)
        bad = validate_consistency(pruned)
        if bad:
            raise RuntimeError("pruned model is inconsistent: " + "; ".join(bad))
        sl = self.cfg["eval.stats_seq_len"]
        before = count_stats(base, sl)
        after = count_stats(pruned, sl, reference=base)
        self.save_model("pruned.dprn", pruned, "pruned")
        self.write_json("prune_stats.json", {"base": before.to_record(), "pruned": after.to_record(),
                                             "achieved_ratio": after.achieved_ratio,
                                             "predicted_ratio": plan.achieved_ratio,
                                             "selected": len(plan.selected)})
        return pruned

    def recover(self):
        c = self.cfg
        pruned = self.load_model("pruned.dprn")
        targets = None if c["recover.targets"] == "all" else [t.strip() for t in c["recover.targets"].split(",")]
        adapted = attach_lora(pruned, c["recover.rank"], c["recover.alpha"], targets or default_targets(pruned),
                              c["seed.lora"])
        trace = train_lora(adapted, self.tokens("recover"), lr=c["recover.lr"], steps=c["recover.steps"],
                           batch=c["recover.batch"], seq_len=c["recover.seq_len"], seed=c["seed.data"],
                           eval_tokens=self.tokens("recover_val"), eval_every=c["recover.eval_every"],
                           early_stop=c["recover.early_stop"], eval_seq_len=c["eval.seq_len"])
        merged = merge_lora(adapted)
        self.save_model("adapters.dprn", adapted, "adapted")
        self.save_model("merged.dprn", merged, "merged")
        self.write_jsonl("recover_trace.jsonl", trace)
        self.log(f"recover: best eval step {best_step(trace)}")
        return merged

    def evaluate(self):
        c = self.cfg
        ev = self.tokens("eval")
        sl, ssl = c["eval.seq_len"], c["eval.stats_seq_len"]
        base = self.load_model("base.dprn")
        reports = [evaluate(base, ev, sl, "base", self.digest, count_stats(base, ssl))]
        for name, tag in (("pruned.dprn", "pruned"), ("merged.dprn", "merged")):
            m = self.load_model(name)
            reports.append(evaluate(m, ev, sl, tag, self.digest, count_stats(m, ssl, reference=base)))
        for r in reports:
            r.extra["model_digest"] = self.model_digest
        self.write_jsonl("eval.jsonl", (r.to_record() for r in reports))
        self.write_text("summary.txt", summary_table(reports))
        return reports

    def ablate(self):
        c = self.cfg
        from .config import parse_floats
        base = self.load_model("base.dprn")
        toks = {s: self.tokens(s) for s in ("calib", "eval", "recover", "recover_val")}
        st = AblationSettings(
            ratios=tuple(parse_floats(c["ablate.ratios"], "ablate.ratios")),
            sweep=tuple(parse_floats(c["ablate.sweep"], "ablate.sweep")),
            unit=c["prune.unit"], fisher=c["prune.fisher"], protected=c.protected_layers(None),
            calib_n=c["prune.calib_n"], calib_seq_len=c["prune.calib_seq_len"], eval_seq_len=c["eval.seq_len"],
            seed=c["seed.data"], random_seed=c["seed.random"], recover=c["ablate.recover"],
            recover_kw=dict(rank=c["recover.rank"], alpha=c["recover.alpha"], lora_seed=c["seed.lora"],
                            lr=c["recover.lr"], steps=c["ablate.recover_steps"], batch=c["recover.batch"],
                            seq_len=c["recover.seq_len"], eval_every=c["recover.eval_every"],
                            early_stop=c["recover.early_stop"], batch_seed=c["seed.data"],
                            eval_seq_len=c["eval.seq_len"]))
        reports = ablation_suite(base, toks, st, self.digest,
                                 log=lambda r: self.log(f"ablate: {r.tag} {r.extra.get('method')} "
                                                        f"{r.extra.get('ratio')} ppl={r.ppl:.3f}"))
        self.write_jsonl("ablation.jsonl", (r.to_record() for r in reports))
        return reports

    def run(self, stage):
        fn = {"train-base": self.train_base, "discover": self.discover, "estimate": self.estimate,
              "plan": self.plan, "prune": self.prune, "recover": self.recover, "eval": self.evaluate,
              "ablate": self.ablate}[stage]
        t = time.time()
        out = fn()
        self.log(f"{stage} done in {time.time() - t:.1f}s")
        return out

    def pipeline(self):
        stages = [s for s in STAGES if s != "ablate"]
        if self.cfg["pipeline.ablate"]:
            stages.append("ablate")
        for s in stages:
            self.run(s)


def summary_table(reports):
    rows = [f"{'model':<10} {'ppl':>10} {'params':>9} {'ratio':>8} {'MACs':>11} {'memory(B)':>10}"]
    for r in reports:
        s = r.stats or {}
        rows.append(f"{r.tag:<10} {r.ppl:>10.4f} {s.get('param_count', 0):>9d} {s.get('achieved_ratio', 0.0):>8.4f} "
                    f"{s.get('macs', 0):>11d} {s.get('memory_estimate', 0):>10d}")
    return "\n".join(rows) + "\n"
