"""Walk one student's event stream and show which sparse features fire
for a single prediction, block by block."""

from ktrace.core import StudentState
from ktrace.features import FeatureFamily, Recipe, emit, fit_encoders, update_state
from ktrace.synth import GeneratorConfig, generate

dataset, _ = generate(GeneratorConfig(
    seed=9, n_students=30, n_questions=12, n_kcs=4, responses_per_student=20,
))

recipe = Recipe(families=(
    FeatureFamily("bias"),
    FeatureFamily("question"),
    FeatureFamily("kc"),
    FeatureFamily("counts", "total"),
    FeatureFamily("counts", "kc"),
    FeatureFamily("tw_counts", "total"),
    FeatureFamily("smoothed_avg_correct"),
    FeatureFamily("response_pattern"),
), n_recent=4)

encoder = fit_encoders(dataset.students, recipe, dataset.manifest)
print(f"encoder dimension {encoder.dim}, train correct-rate {encoder.rbar:.3f}")
for fam, offset, size in encoder.blocks:
    print(f"  block {fam.name:22s} offset {offset:4d} size {size}")

# replay one student and dissect the 10th response
sid = sorted(dataset.students)[0]
events = dataset.students[sid]
state = StudentState(recipe.tw.finite_seconds)
seen = 0
for event in events:
    if event.is_response():
        seen += 1
        if seen == 10:
            phi = emit(encoder, state, event)
            print(f"\n{sid} response #10, question {event.question_id}, "
                  f"correct={event.correct}")
            for fam, offset, size in encoder.blocks:
                active = phi.slice_block(offset, size)
                if active:
                    shown = ", ".join(f"[{i}]={v:.4f}" for i, v in active)
                    print(f"  {fam.name:22s} {shown}")
            break
    update_state(state, event)
