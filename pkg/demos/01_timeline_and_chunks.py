"""
Timelines, query windows and history chunks
===========================================

One synthetic patient, walked from raw events to the pieces the model sees:
the tokenized timeline, the query window for in-hospital mortality and the
history cut into chunks by each strategy.

Run with ``python demos/01_timeline_and_chunks.py``.
"""

from timeline_rag.chunker import ChunkingConfig, Strategy, chunk_history
from timeline_rag.tasks import MARKER_CODE, SyntheticConfig, generate, get_task, query_window
from timeline_rag.timeline import CareStage

ds = generate(SyntheticConfig(patients=20, seed=0))
truth = ds.manifest["truth"]

# pick someone who carries the planted marker
pid = next(p for p in ds.timelines if truth[p]["marker"])
tl = ds.timelines[pid]
print(f"{pid}: {len(tl)} events, label {truth[pid]['planted_label']}, marker {truth[pid]['marker']}")

###############################################################################
# The timeline
# ------------
# Statics come first, gap tokens mark silences of a week or more, and
# every event carries its visit number and care stage.

for e in tl.events[:12]:
    t = "-" if e.time_minutes is None else e.time_minutes
    print(f"  v{e.visit_order:<2} {CareStage(e.care_stage).name:<6} t={t!s:<8} {ds.vocab.decode(e.concept_id)}")
print("  ...")

###############################################################################
# Query and history
# -----------------
# The query is the last 32 events up to 48 h after ICU admission. Everything
# before it is history, and only history gets indexed.

task = get_task("IHM_48H")
split = query_window(tl, task, 0, query_size=32)
marker_id = ds.vocab.encode(MARKER_CODE)
where = [i for i, e in enumerate(tl.events) if e.concept_id == marker_id]
print(f"query covers events [{split.query_start}, {split.query_stop}), history has {len(split.history)} events")
print(f"marker copies at indices {where}; all before the query: {all(i < split.query_start for i in where)}")

###############################################################################
# Chunking strategies
# -------------------
# Each strategy covers the history without holes. Long pieces are re-split
# by the event window so no chunk exceeds the size limit.

for strategy in Strategy:
    cfg = ChunkingConfig(strategy, size=32, overlap=4, window_minutes=360)
    descs = chunk_history(split.history, cfg, pid)
    spans = ", ".join(f"[{d.start_index},{d.end_index})" for d in descs[:6])
    more = " ..." if len(descs) > 6 else ""
    print(f"{strategy.name:<6} {len(descs):>3} chunks: {spans}{more}")
