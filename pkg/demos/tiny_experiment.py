"""A full pipeline run at toy scale: train clean / W-ER / W-CR codecs (with and
without RIL), certify them and attack them, then print the scorecard.

Takes under a minute: python3 demos/tiny_experiment.py [out_dir]
"""
import sys

from wirlab.harness.config import parse_config
from wirlab.harness.experiment import read_csv, run_experiment

CONFIG = """
side = 16
count = 1000
n_bits = 8
fpr = 0.05
lr = 0.003
eta_r = 10  # the defaults are tuned for 32x32; this toy codec needs a weaker residual penalty
clean_epochs = 15
robust_epochs = 3
ril_epochs = 2
residual_ramp = 2
eval_count = 40
cert_samples = 5
cert_n = 200
forge_m = 1, 5
forge_users = 8
extract_victims = 4
link_users = 3
link_per_user = 8
leak_secrets = 10
"""


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "tiny_run"
    result = run_experiment(parse_config(CONFIG), out)
    print("status:", result.status)
    for row in read_csv(result.out / "scorecard.csv"):
        print(f"{row['model']:18} m={row['m']:>2} forged={float(row['forged_bit_acc']):.3f} "
              f"attack={float(row['attack_bit_acc']):.3f} silhouette={float(row['silhouette']):.3f}")
    print("full report:", result.out / "report.md")


if __name__ == "__main__":
    main()
