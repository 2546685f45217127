"""Generate a small nonlinear market, fit both models and compare them with the baselines.

Run from the repository root:  python3 demos/quickstart.py
Runs in well under a minute.
"""

from ptrchoice import dcm
from ptrchoice.data import split_dataset
from ptrchoice.datagen import GeneratorConfig, generate_dataset, nonlinear_utility
from ptrchoice.metrics import baseline_predictions, evaluate, summary_table
from ptrchoice.mnl import MNLDesign, MNLFitConfig, fit_mnl, predict_dataset
from ptrchoice.preprocess import encode_dataset, fit_preprocessor

data = generate_dataset(GeneratorConfig(n_sessions=2000, utility=nonlinear_utility(), seed=11))
split = split_dataset(data, (0.7, 0.15, 0.15), seed=11)
print(f"sessions: train {len(split.train)}, valid {len(split.valid)}, test {len(split.test)}")

# vocabularies and scaling come from the training split only
p = fit_preprocessor(split.train)

mnl_params, report = fit_mnl(encode_dataset(p, split.train), MNLDesign.from_preprocessor(p), MNLFitConfig(max_iters=2000))
print(f"MNL: {report.iterations} iterations, final log-likelihood {report.final_log_likelihood:.1f}")

dcm_params, history = dcm.train(split, p, dcm.DCMConfig(memory_size=16, max_epochs=15, patience=4, seed=11))
print(f"DCM: {history.epochs_run} epochs, best validation top-1 {max(history.valid_top1):.3f}")

reports = [
    evaluate("dcm", dcm.predict_dataset(dcm_params, p, split.test), split.test),
    evaluate("mnl", predict_dataset(mnl_params, p, split.test), split.test),
    evaluate("cheapest", baseline_predictions(split.test, "cheapest"), split.test),
    evaluate("shortest", baseline_predictions(split.test, "shortest"), split.test),
]
print()
print(summary_table(reports))

# a single ranked list: (display index, probability), most likely first
s = split.test[0]
print()
print(f"session {s.id}: chosen index {s.chosen_index}")
for j, prob in dcm.predict(dcm_params, p, s)[:5]:
    print(f"  #{j:2d}  p={prob:.3f}  price={s.value('price', j):.2f}")
