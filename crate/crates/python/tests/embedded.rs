use pyo3::prelude::*;
use pyo3::types::PyDict;

use _pmbtrack::_pmbtrack as bindings;

type State4 = (f64, f64, f64, f64);

#[test]
fn module_works_from_an_embedded_interpreter() {
    pyo3::append_to_inittab!(bindings);
    Python::initialize();
    Python::attach(|py| {
        let m = py.import("_pmbtrack").unwrap();
        let kl: f64 = m
            .call_method1("bernoulli_poisson_kl", (0.2,))
            .unwrap()
            .extract()
            .unwrap();
        assert!((kl - 0.0214852).abs() < 1e-7);
        assert!(m.call_method1("bernoulli_poisson_kl", (1.5,)).is_err());

        let d: f64 = m
            .call_method1("ospa", (vec![(0.0, 0.0, 0.0, 0.0)], vec![(3.0, 0.0, 4.0, 0.0)]))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(d, 5.0);

        let marg = m
            .call_method1("exact_marginals", (vec![1.0], vec![vec![1.0]], vec![1.0]))
            .unwrap();
        let p: Vec<Vec<f64>> = marg.getattr("p").unwrap().extract().unwrap();
        assert!((p[0][0] - 0.5).abs() < 1e-12);

        let kwargs = PyDict::new(py);
        kwargs.set_item("initial_mass", 1.0).unwrap();
        let tracker = m.getattr("UniformTracker").unwrap().call((), Some(&kwargs)).unwrap();
        tracker.call_method1("step", (vec![(0.0, 0.0)],)).unwrap();
        let t: u32 = tracker.getattr("time").unwrap().extract().unwrap();
        assert_eq!(t, 1);
        let tracks: Vec<(u64, f64, State4)> = tracker.getattr("tracks").unwrap().extract().unwrap();
        assert_eq!(tracks.len(), 1);

        let presets: Vec<String> = m.call_method0("presets").unwrap().extract().unwrap();
        assert_eq!(presets, ["fig1", "fig3", "fig5"]);
        assert!(m.call_method1("preset_toml", ("nope",)).is_err());
    });
}
