import pytest

from liverseg.data import Case
from liverseg.phantom import PhantomSpec, generate_cases, split_cases

# lines collected by the acceptance suite, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def to_cases(phantom_cases, with_masks=True):
    return [
        Case(c.case_id, c.ged4, f"domain{c.domain}", c.mask if with_masks else None, c.t1) for c in phantom_cases
    ]


SMALL_SPEC = dict(dims=(20, 20, 10), cases_per_domain=6, n_labeled=2, n_pseudo=2)


@pytest.fixture(scope="session")
def small_phantom():
    spec = PhantomSpec(**SMALL_SPEC)
    cases = generate_cases(spec)
    lab, unl, pse, test = split_cases(spec, cases)
    return dict(
        spec=spec,
        cases=cases,
        labeled=to_cases(lab),
        unlabeled=to_cases(unl, with_masks=False),
        pseudo_pool=to_cases(pse, with_masks=False),
        test=to_cases(test),
    )
