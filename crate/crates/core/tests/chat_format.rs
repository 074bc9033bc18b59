use proptest::prelude::*;
use rgdesk::chatfmt::*;
use rgdesk::engine::chat_prompt;

const KNOCK_KNOCK: &str = "<start_of_turn>user\nKnock knock.<end_of_turn>\n\
<start_of_turn>model\nWho's there?<end_of_turn>\n\
<start_of_turn>user\nGemma.<end_of_turn>\n\
<start_of_turn>model\nGemma who?<end_of_turn>\n";

fn knock_knock() -> Dialogue {
    Dialogue::new()
        .push(Role::User, "Knock knock.")
        .push(Role::Model, "Who's there?")
        .push(Role::User, "Gemma.")
        .push(Role::Model, "Gemma who?")
}

#[test]
fn knock_knock_golden() {
    let text = format_dialogue(&knock_knock()).unwrap();
    assert_eq!(text.as_bytes(), KNOCK_KNOCK.as_bytes());
    assert_eq!(parse_dialogue(&text).unwrap(), knock_knock());
}

#[test]
fn cue_after_user_turn() {
    let d = Dialogue::new().push(Role::User, "Knock knock.");
    let text = format_dialogue(&d).unwrap();
    assert_eq!(
        text,
        "<start_of_turn>user\nKnock knock.<end_of_turn>\n<start_of_turn>model\n"
    );
    assert_eq!(parse_dialogue(&text).unwrap(), d);
}

#[test]
fn prompt_ids_use_control_tokens() {
    let d = Dialogue::new().push(Role::User, "Hi");
    let ids = chat_prompt(&d).unwrap();
    let mut want = vec![BOS, START_TURN];
    want.extend(b"user\nHi".iter().map(|&b| b as u32));
    want.extend([END_TURN, b'\n' as u32, START_TURN]);
    want.extend(b"model\n".iter().map(|&b| b as u32));
    assert_eq!(ids, want);
}

#[test]
fn malformed_input_reports_offsets() {
    let cases = [
        ("", 0),
        ("hello", 0),
        ("<start_of_turn>user\nHi<end_of_turn>", 35),
        ("<start_of_turn>robot\nHi<end_of_turn>\n", 15),
        ("<start_of_turn>user\nA<start_of_turn>B<end_of_turn>\n", 21),
    ];
    for (text, offset) in cases {
        match parse_dialogue(text) {
            Err(rgdesk::error::Error::Dialogue { offset: o, .. }) => {
                assert_eq!(o, offset, "{text:?}")
            }
            other => panic!("{text:?}: {other:?}"),
        }
    }
    assert!(parse_dialogue("<start_of_turn>model\nHi<end_of_turn>\n").is_err());
    assert!(format_dialogue(&Dialogue::new().push(Role::User, "a<bos>b")).is_err());
}

fn turn_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 .,!?'<>/_\n\t\u{e9}\u{4e2d}]{0,40}".prop_filter("no control strings", |s| {
        ![BOS_STR, START_TURN_STR, END_TURN_STR]
            .iter()
            .any(|c| s.contains(c))
    })
}

proptest! {
    #[test]
    fn format_then_parse_is_identity(texts in prop::collection::vec(turn_text(), 1..8)) {
        let mut d = Dialogue::new();
        for (i, t) in texts.iter().enumerate() {
            d = d.push(if i % 2 == 0 { Role::User } else { Role::Model }, t.clone());
        }
        let text = format_dialogue(&d).unwrap();
        prop_assert_eq!(parse_dialogue(&text).unwrap(), d);
        prop_assert_eq!(decode_text(&encode_with_control(&text)).unwrap(), text);
    }

    #[test]
    fn bytes_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        prop_assert_eq!(decode_bytes(&ids).unwrap(), bytes);
    }
}
