import pytest

from datasetclone.catalog import load_backgrounds, load_catalog

DATA = __file__.rsplit("/", 1)[0] + "/data"

E2E_CLASSES = [
    "n02086910", "n91000001", "n91000002", "n91000003", "n91000004",
    "n91000005", "n91000006", "n91000007", "n91000008", "n91000009",
]
SAMPLE_CLASSES = ["n02086910", "n03947888", "n01558993", "n02086240", "n01820546"]


@pytest.fixture(scope="session")
def meta_path():
    return f"{DATA}/wordnet_meta.json"


@pytest.fixture(scope="session")
def backgrounds_path():
    return f"{DATA}/backgrounds.txt"


@pytest.fixture(scope="session")
def sample_catalog(meta_path):
    return load_catalog(meta_path, SAMPLE_CLASSES, name="sample5")


@pytest.fixture(scope="session")
def e2e_catalog(meta_path):
    return load_catalog(meta_path, E2E_CLASSES, name="mock10")


@pytest.fixture(scope="session")
def backgrounds(backgrounds_path):
    return load_backgrounds(backgrounds_path)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        number, name = marker.args
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE {number} [{name}]: {verdict}")
