"""datashare-simbench: benchmarks and simulations to CSV.

    datashare-simbench psi --m 10 --N 1000 --S 100000
        variant,m,N,S,client_exp,client_tag_hashes,server_exp,server_tag_hashes,
        online_bytes,offline_exp,online_s,offline_s,correct

    datashare-simbench messaging --journalists 1000 --rate 4,48 --days 30 --seed 0
        journalists,rate_per_day,mean_latency_min,p95_latency_min,analytic_mean_min,
        analytic_p95_min,mb_per_day,mb_per_day_with_probes,storage_gb_7d
      --sweep 250,500,1000,2000 adds a population sweep (bytes per day) and
      the fitted growth exponents on stderr.

    datashare-simbench e2e --config sim.json
        party,exponentiations,tag_hashes,group_hashes,bytes_sent,bytes_received,
        padded_sent,padded_received,messages,storage_bytes
      plus a JSON summary on stderr (or --summary PATH).

``--dat PATH`` also writes the rows as a whitespace-separated table with a
``#`` header line, which gnuplot reads directly.
"""
import argparse
import csv
import json
import sys

from . import e2e, psi
from . import messaging as msim


def _floats(s):
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s):
    return [int(x) for x in s.split(",") if x.strip()]


def write_csv(rows, out):
    if not rows:
        return
    w = csv.DictWriter(out, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)


def write_dat(rows, path):
    cols = list(rows[0])
    with open(path, "w") as f:
        f.write("# " + " ".join(cols) + "\n")
        for r in rows:
            f.write(" ".join(str(r[c]) for c in cols) + "\n")


def _emit(rows, args):
    if args.out == "-":
        write_csv(rows, sys.stdout)
    else:
        with open(args.out, "w", newline="") as f:
            write_csv(rows, f)
    if args.dat:
        write_dat(rows, args.dat)


def cmd_psi(args):
    res = psi.run_psi_bench(args.m, args.N, args.S, args.seed)
    _emit(psi.summary_rows(res, args.m, args.N), args)


def cmd_messaging(args):
    rows = msim.run_messaging_sim(args.journalists, _floats(args.rate), args.days, args.seed,
                                  args.latency_messages)
    _emit(rows, args)
    if args.sweep:
        sweep = msim.population_sweep(_ints(args.sweep), _floats(args.rate)[0])
        if args.sweep_out:
            with open(args.sweep_out, "w", newline="") as f:
                write_csv(sweep, f)
        print(json.dumps({"exponents": msim.sweep_exponents(sweep)}), file=sys.stderr)


def cmd_e2e(args):
    cfg = e2e.SimConfig.load(args.config) if args.config else e2e.SimConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    res = e2e.run_e2e_sim(cfg)
    _emit(list(res["ledger"].rows()), args)
    summary = {k: v for k, v in res.items() if k != "ledger"}
    text = json.dumps(summary, indent=2, default=str)
    if args.summary:
        with open(args.summary, "w") as f:
            f.write(text + "\n")
    else:
        print(text, file=sys.stderr)


def build_parser():
    ap = argparse.ArgumentParser(prog="datashare-simbench", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog=__doc__.split("\n", 1)[1])
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, seed=0):
        p.add_argument("--seed", type=int, default=seed)
        p.add_argument("--out", default="-", help="CSV path (default stdout)")
        p.add_argument("--dat", default=None, help="also write a gnuplot data file")

    p = sub.add_parser("psi", help="MS-PSI vs C-PSI vs vanilla PSI operation counts")
    p.add_argument("--m", type=int, default=10, help="client keywords")
    p.add_argument("--N", type=int, default=1000, help="server sets (documents)")
    p.add_argument("--S", type=int, default=100_000, help="total server keywords")
    common(p)
    p.set_defaults(fn=cmd_psi)

    p = sub.add_parser("messaging", help="cover-traffic latency and bandwidth")
    p.add_argument("--journalists", type=int, default=1000)
    p.add_argument("--rate", default="4,48", help="cover rates per day, comma separated")
    p.add_argument("--days", type=int, default=30, help="simulated days for the bandwidth draw")
    p.add_argument("--latency-messages", type=int, default=100_000)
    p.add_argument("--sweep", default=None, help="population sizes, comma separated")
    p.add_argument("--sweep-out", default=None, help="CSV path for the sweep rows")
    common(p)
    p.set_defaults(fn=cmd_messaging)

    p = sub.add_parser("e2e", help="full deployment on a virtual clock")
    p.add_argument("--config", default=None, help="JSON object of SimConfig fields")
    p.add_argument("--summary", default=None, help="write the JSON summary here")
    common(p, seed=None)
    p.set_defaults(fn=cmd_e2e)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
