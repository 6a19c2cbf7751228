mod common;

use common::fixture;
use g2gt::conllu::{load_conllu, read_conllu, save_conllu, write_conllu, Sentence};
use g2gt::Error;
use g2gt_core::graph::DepTree;

#[test]
fn two_token_sentence() {
    let c = load_conllu(fixture("two_token.conllu")).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].forms, ["Hello", "world"]);
    assert_eq!(c[0].tree, DepTree::from_heads(&[0, 1], &["root", "vocative"]).unwrap());
}

#[test]
fn ranges_and_empty_nodes_skipped_comments_ignored() {
    let c = load_conllu(fixture("multiword.conllu")).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c[0].forms, ["Vamos", "nos", "a", "el", "mar", "."]);
    assert_eq!(
        c[0].tree,
        DepTree::from_heads(&[0, 1, 5, 5, 1, 1], &["root", "obj", "case", "det", "obl", "punct"]).unwrap()
    );
    assert_eq!(c[1].forms, ["Hola"]);
}

#[test]
fn empty_input_gives_empty_corpus() {
    assert!(read_conllu("".as_bytes()).unwrap().is_empty());
    assert!(read_conllu("# only a comment\n\n\n".as_bytes()).unwrap().is_empty());
    let mut buf = Vec::new();
    write_conllu(&mut buf, &[]).unwrap();
    assert!(buf.is_empty());
}

#[test]
fn bad_column_count_reports_line() {
    let text = "# c\n1\tA\t_\t_\t_\t_\t0\troot\t_\t_\n2\tB\t_\t_\t_\t1\tdep\t_\t_\n";
    match read_conllu(text.as_bytes()) {
        Err(Error::Conllu { line, message }) => {
            assert_eq!(line, 3);
            assert!(message.contains("columns"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_integer_head_is_rejected() {
    let text = "1\tA\t_\t_\t_\t_\tx\troot\t_\t_\n";
    assert!(matches!(read_conllu(text.as_bytes()), Err(Error::Conllu { line: 1, .. })));
    let text = "1\tA\t_\t_\t_\t_\t_\troot\t_\t_\n";
    assert!(read_conllu(text.as_bytes()).is_err());
}

#[test]
fn malformed_trees_are_rejected() {
    // head out of range, then a cycle
    let oob = "1\tA\t_\t_\t_\t_\t3\troot\t_\t_\n2\tB\t_\t_\t_\t_\t1\tdep\t_\t_\n";
    assert!(read_conllu(oob.as_bytes()).is_err());
    let cyc = "1\tA\t_\t_\t_\t_\t2\tdep\t_\t_\n2\tB\t_\t_\t_\t_\t1\tdep\t_\t_\n";
    assert!(read_conllu(cyc.as_bytes()).is_err());
    let skip = "1\tA\t_\t_\t_\t_\t0\troot\t_\t_\n3\tB\t_\t_\t_\t_\t1\tdep\t_\t_\n";
    assert!(read_conllu(skip.as_bytes()).is_err());
}

#[test]
fn load_error_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.conllu");
    std::fs::write(&p, "1\tA\t_\n").unwrap();
    let msg = load_conllu(&p).unwrap_err().to_string();
    assert!(msg.contains("bad.conllu:1"), "{msg}");
    assert!(load_conllu(dir.path().join("missing.conllu")).is_err());
}

#[test]
fn round_trip_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["toy.conllu", "multiword.conllu", "two_token.conllu"] {
        let a = load_conllu(fixture(name)).unwrap();
        let out = dir.path().join(name);
        save_conllu(&out, &a).unwrap();
        let b = load_conllu(&out).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn written_columns() {
    let s = Sentence::new(
        vec!["Hi".into(), "there".into()],
        DepTree::from_heads(&[0, 1], &["root", "advmod"]).unwrap(),
    )
    .unwrap();
    let mut buf = Vec::new();
    write_conllu(&mut buf, &[s]).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "1\tHi\t_\t_\t_\t_\t0\troot\t_\t_\n2\tthere\t_\t_\t_\t_\t1\tadvmod\t_\t_\n\n"
    );
}
