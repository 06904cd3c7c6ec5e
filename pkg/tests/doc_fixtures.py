"""Hand-counted documents shared by the doc-eval unit and acceptance tests."""
from medkit.doceval.tables import LabRow, LabTable


def T(*rows):
    return LabTable.from_rows([LabRow.make(*r) for r in rows])


# each entry: (pred, gold, (tp, fp, fn)) counted by hand over the four fields
FIVE_DOCS = [
    # identical two-row tables
    (T(("WBC", "10.2", "3.5-9.5", "10^9/L"), ("RBC", "4.5", "4.3-5.8", "10^12/L")),
     T(("WBC", "10.2", "3.5-9.5", "10^9/L"), ("RBC", "4.5", "4.3-5.8", "10^12/L")),
     (8, 0, 0)),
    # one matched row, wrong unit
    (T(("HGB", "135", "130-175", "mg/L")),
     T(("HGB", "135", "130-175", "g/L")),
     (3, 1, 1)),
    # pred {CRP, PLT} vs gold {PLT, ALT}; the PLT result differs
    (T(("CRP", "5", "<10", "mg/L"), ("PLT", "210", "125-350", "10^9/L")),
     T(("PLT", "200", "125-350", "10^9/L"), ("ALT", "30", "9-50", "U/L")),
     (3, 5, 5)),
    # nothing predicted
    (T(),
     T(("GLU", "5.6", "3.9-6.1", "mmol/L")),
     (0, 0, 4)),
    # canonical equality on every field, then a fuzzy name match with the name wrong
    (T(("白细胞计数 ", "６.1↑", "3.5～9.5", "10⁹/L"), ("Neutrophil percentag", "60", "40-75", "%")),
     T(("白细胞计数", "6.1", "3.5-9.5", "10^9/L"), ("Neutrophil percentage", "60", "40-75", "%")),
     (7, 1, 1)),
]

# pooled: tp 21, fp 7, fn 11
MICRO = (21 / 28, 21 / 32, 0.7)
MACRO_DOC_F1 = (1.0 + 0.75 + 0.375 + 0.0 + 0.875) / 5

# (result, reference, expected label)
ABNORMALITY_TABLE = [
    ("10.2", "3.5-9.5", "High"),
    ("3.4", "3.5-9.5", "Low"),
    ("3.5", "3.5-9.5", "Normal"),
    ("9.5", "3.5-9.5", "Normal"),
    ("4.2", "<5.0", "Normal"),
    ("5.0", "<5.0", "High"),
    ("5.0", "≤5.0", "Normal"),
    ("1.0", ">1.0", "Low"),
    ("1.0", "≥1.0", "Normal"),
    ("0.5", ">=1.0", "Low"),
    ("7.0", "阴性", "Unknown"),
    ("positive", "3.5-9.5", "Unknown"),
]
