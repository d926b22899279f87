from orbitsr import pipeline as PL
from orbitsr import plotting
from orbitsr.trainer import AblationRow, History


def test_figures_are_reproducible(tmp_path):
    hist = History(loss=[0.5, 0.3, 0.2], grad_norm=[2.0, 1.0, 0.5])
    rows = [AblationRow("CM0LRA0GFB0", False, False, False, 10, 0.1, 20.0),
            AblationRow("CM1LRA1GFB1", True, True, True, 20, 0.05, 21.5)]
    dec = PL.Decision("transmit", 0.9, 0.5, PL.ResourceLedger(4, 2 ** 20, 10 ** 9, {}))
    for i in range(2):
        plotting.plot_history(hist, tmp_path / f"h{i}.png")
        plotting.plot_ablation(rows, tmp_path / f"a{i}.png")
        plotting.plot_pipeline([("overlap", dec)], tmp_path / f"p{i}.png")
    for stem in "hap":
        a, b = (tmp_path / f"{stem}0.png").read_bytes(), (tmp_path / f"{stem}1.png").read_bytes()
        assert a[:4] == b"\x89PNG" and a == b


def test_figure_path():
    assert plotting.figure_path("out/report.csv").name == "report.png"
