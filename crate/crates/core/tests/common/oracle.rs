//! Reference BLEU-4 / ROUGE values computed with a separate Python
//! implementation (Counter-based clipped n-grams, memoized recursive LCS)
//! before the Rust metrics were written. Scores are on the 0–100 scale;
//! ROUGE triples are [precision, recall, f1].

pub struct OraclePair {
    pub hyp: &'static str,
    pub reference: &'static str,
    pub bleu: f64,
    pub rouge1: [f64; 3],
    pub rouge2: [f64; 3],
    pub rouge_l: [f64; 3],
}

/// Unsmoothed corpus BLEU-4 over every pair in [`PAIRS`].
pub const CORPUS_BLEU_ALL: f64 = 41.30595268392576;
/// Unsmoothed corpus BLEU-4 over `PAIRS[3..12]`.
pub const CORPUS_BLEU_3_12: f64 = 45.45598687193278;

pub const PAIRS: &[OraclePair] = &[
    OraclePair {
        hyp: "the cat sat on the mat",
        reference: "the cat sat on a mat",
        bleu: 53.7284965911771,
        rouge1: [83.33333333333334, 83.33333333333334, 83.33333333333334],
        rouge2: [60.0, 60.0, 60.0],
        rouge_l: [83.33333333333334, 83.33333333333334, 83.33333333333334],
    },
    OraclePair {
        hyp: "a b c",
        reference: "a c d",
        bleu: 0.0,
        rouge1: [66.66666666666666, 66.66666666666666, 66.66666666666666],
        rouge2: [0.0, 0.0, 0.0],
        rouge_l: [66.66666666666666, 66.66666666666666, 66.66666666666666],
    },
    OraclePair {
        hyp: "a b c d",
        reference: "b d",
        bleu: 0.0,
        rouge1: [50.0, 100.0, 66.66666666666666],
        rouge2: [0.0, 0.0, 0.0],
        rouge_l: [50.0, 100.0, 66.66666666666666],
    },
    OraclePair {
        hyp: "the patient should take 500 mg of paracetamol every six hours",
        reference: "the patient may take 500 mg paracetamol every six hours",
        bleu: 37.81790427652474,
        rouge1: [81.81818181818183, 90.0, 85.71428571428572],
        rouge2: [60.0, 66.66666666666666, 63.1578947368421],
        rouge_l: [81.81818181818183, 90.0, 85.71428571428572],
    },
    OraclePair {
        hyp: "Consult a doctor before taking ibuprofen.",
        reference: "consult your doctor before taking ibuprofen",
        bleu: 53.7284965911771,
        rouge1: [83.33333333333334, 83.33333333333334, 83.33333333333334],
        rouge2: [60.0, 60.0, 60.0],
        rouge_l: [83.33333333333334, 83.33333333333334, 83.33333333333334],
    },
    OraclePair {
        hyp: "hypertension is high blood pressure",
        reference: "high blood pressure is called hypertension",
        bleu: 0.0,
        rouge1: [100.0, 83.33333333333334, 90.9090909090909],
        rouge2: [50.0, 40.0, 44.44444444444445],
        rouge_l: [60.0, 50.0, 54.54545454545454],
    },
    OraclePair {
        hyp: "the the the the",
        reference: "the cat is on the mat",
        bleu: 0.0,
        rouge1: [50.0, 33.33333333333333, 40.0],
        rouge2: [0.0, 0.0, 0.0],
        rouge_l: [50.0, 33.33333333333333, 40.0],
    },
    OraclePair {
        hyp: "insulin lowers blood glucose levels in diabetic patients",
        reference: "insulin lowers blood glucose in patients with diabetes",
        bleu: 38.260294162784476,
        rouge1: [75.0, 75.0, 75.0],
        rouge2: [42.857142857142854, 42.857142857142854, 42.857142857142854],
        rouge_l: [75.0, 75.0, 75.0],
    },
    OraclePair {
        hyp: "Answer: B. The correct option is beta blockers.",
        reference: "B. beta blockers",
        bleu: 0.0,
        rouge1: [37.5, 100.0, 54.54545454545454],
        rouge2: [14.285714285714285, 50.0, 22.222222222222225],
        rouge_l: [37.5, 100.0, 54.54545454545454],
    },
    OraclePair {
        hyp: "I cannot help with that request.",
        reference: "I can't help with making poison.",
        bleu: 0.0,
        rouge1: [50.0, 50.0, 50.0],
        rouge2: [20.0, 20.0, 20.000000000000004],
        rouge_l: [50.0, 50.0, 50.0],
    },
    OraclePair {
        hyp: "seek emergency care immediately if chest pain persists",
        reference: "if chest pain persists seek emergency care immediately",
        bleu: 69.1441569283882,
        rouge1: [100.0, 100.0, 100.0],
        rouge2: [85.71428571428571, 85.71428571428571, 85.71428571428571],
        rouge_l: [50.0, 50.0, 50.0],
    },
    OraclePair {
        hyp: "one two three four five six seven eight",
        reference: "one two three four five six seven eight nine ten",
        bleu: 77.8800783071405,
        rouge1: [100.0, 80.0, 88.8888888888889],
        rouge2: [100.0, 77.77777777777779, 87.50000000000001],
        rouge_l: [100.0, 80.0, 88.8888888888889],
    },
    OraclePair {
        hyp: "x y z",
        reference: "p q r",
        bleu: 0.0,
        rouge1: [0.0, 0.0, 0.0],
        rouge2: [0.0, 0.0, 0.0],
        rouge_l: [0.0, 0.0, 0.0],
    },
    OraclePair {
        hyp: "Aspirin, ibuprofen, and naproxen are NSAIDs.",
        reference: "aspirin ibuprofen and naproxen are nsaids",
        bleu: 100.0,
        rouge1: [100.0, 100.0, 100.0],
        rouge2: [100.0, 100.0, 100.0],
        rouge_l: [100.0, 100.0, 100.0],
    },
    OraclePair {
        hyp: "the dose depends on body weight and kidney function",
        reference: "dose depends on kidney function and body weight",
        bleu: 0.0,
        rouge1: [88.88888888888889, 100.0, 94.11764705882352],
        rouge2: [50.0, 57.14285714285714, 53.333333333333336],
        rouge_l: [55.55555555555556, 62.5, 58.82352941176471],
    },
    OraclePair {
        hyp: "<think>the user asks about fever</think> rest and fluids",
        reference: "rest and fluids",
        bleu: 0.0,
        rouge1: [37.5, 100.0, 54.54545454545454],
        rouge2: [28.57142857142857, 100.0, 44.44444444444445],
        rouge_l: [37.5, 100.0, 54.54545454545454],
    },
    OraclePair {
        hyp: "rest and fluids",
        reference: "rest and fluids are recommended for a mild fever",
        bleu: 0.0,
        rouge1: [100.0, 33.33333333333333, 50.0],
        rouge2: [100.0, 25.0, 40.0],
        rouge_l: [100.0, 33.33333333333333, 50.0],
    },
    OraclePair {
        hyp: "a a a b b b",
        reference: "a b a b a b",
        bleu: 0.0,
        rouge1: [100.0, 100.0, 100.0],
        rouge2: [20.0, 20.0, 20.000000000000004],
        rouge_l: [66.66666666666666, 66.66666666666666, 66.66666666666666],
    },
    OraclePair {
        hyp: "Café au lait spots can indicate neurofibromatosis",
        reference: "café au lait spots may indicate neurofibromatosis type 1",
        bleu: 36.74145494215667,
        rouge1: [85.71428571428571, 66.66666666666666, 75.0],
        rouge2: [66.66666666666666, 50.0, 57.14285714285715],
        rouge_l: [85.71428571428571, 66.66666666666666, 75.0],
    },
    OraclePair {
        hyp: "antibiotics do not treat viral infections such as the common cold",
        reference: "antibiotics are not effective against viral infections like the common cold",
        bleu: 0.0,
        rouge1: [63.63636363636363, 63.63636363636363, 63.63636363636363],
        rouge2: [30.0, 30.0, 30.0],
        rouge_l: [63.63636363636363, 63.63636363636363, 63.63636363636363],
    },
    OraclePair {
        hyp: "",
        reference: "empty hypothesis reference",
        bleu: 0.0,
        rouge1: [0.0, 0.0, 0.0],
        rouge2: [0.0, 0.0, 0.0],
        rouge_l: [0.0, 0.0, 0.0],
    },
    OraclePair {
        hyp: "take it with food to reduce stomach upset",
        reference: "take with food to reduce stomach upset and nausea",
        bleu: 62.40195441936915,
        rouge1: [87.5, 77.77777777777779, 82.3529411764706],
        rouge2: [71.42857142857143, 62.5, 66.66666666666666],
        rouge_l: [87.5, 77.77777777777779, 82.3529411764706],
    },];
