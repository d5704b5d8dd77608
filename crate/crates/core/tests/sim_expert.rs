use groundflow::plan::{oracle_plan, ActionType, PlannerInput, StructuredPlan};
use groundflow::sim::{
    check_success, render, reset, scripted_expert, step, ExpertConfig, SceneState, TaskConfig,
    TaskName, View,
};

fn input(s: &SceneState) -> PlannerInput {
    PlannerInput::new(s, None, None, render(s, View::Global, 32, 18))
}

fn run_oracle_expert(task: &TaskConfig, seed: u64) -> (bool, Vec<StructuredPlan>) {
    let mut s = reset(task, seed).unwrap();
    let mut plans = Vec::new();
    for _ in 0..16 {
        let plan = oracle_plan(&s, &input(&s));
        plans.push(plan.clone());
        if plan.is_terminal() {
            break;
        }
        let roll = scripted_expert(&s, &plan, &ExpertConfig::default()).unwrap();
        for a in &roll.actions {
            s = step(&s, a).unwrap();
        }
    }
    (check_success(&s), plans)
}

fn all_tasks() -> Vec<TaskConfig> {
    vec![
        TaskConfig::new(TaskName::ClickSingle),
        TaskConfig::new(TaskName::ClickAmongK).with_k(2),
        TaskConfig::new(TaskName::ClickAmongK).with_k(3).identical(),
        TaskConfig::new(TaskName::PickPlaceSingle),
        TaskConfig::new(TaskName::PickPlaceAmongK).with_k(3),
        TaskConfig::new(TaskName::StackK).with_k(2),
        TaskConfig::new(TaskName::StackK).with_k(4),
    ]
}

#[test]
fn expert_completes_every_family() {
    for task in all_tasks() {
        let ok = (0..100)
            .filter(|&seed| run_oracle_expert(&task, seed).0)
            .count();
        assert!(ok >= 99, "{task}: {ok}/100");
    }
}

#[test]
fn stack_plan_sequence_matches_hand_enumeration() {
    let task = TaskConfig::new(TaskName::StackK).with_k(3);
    let s = reset(&task, 0).unwrap();
    let names: Vec<String> = s
        .task
        .target_ids
        .iter()
        .map(|&i| s.object(i).unwrap().name())
        .collect();
    let (ok, plans) = run_oracle_expert(&task, 0);
    assert!(ok);
    let got: Vec<(ActionType, String)> = plans
        .iter()
        .map(|p| (p.action_type, p.target_object.clone()))
        .collect();
    let expect = vec![
        (ActionType::Pick, names[1].clone()),
        (ActionType::Place, names[0].clone()),
        (ActionType::Pick, names[2].clone()),
        (ActionType::Place, names[1].clone()),
        (ActionType::Done, String::new()),
    ];
    assert_eq!(got, expect);
    assert_eq!(
        plans[0].bbox,
        groundflow::sim::ground_truth_bbox(&s, s.task.target_ids[1], 960, 540).unwrap()
    );
}

#[test]
fn pick_at_gripper_is_one_close() {
    let mut s = reset(&TaskConfig::new(TaskName::PickPlaceSingle), 4).unwrap();
    let id = s.task.target_ids[0];
    s.gripper.pos = s.object(id).unwrap().center;
    let plan = oracle_plan(&s, &input(&s));
    assert_eq!(plan.action_type, ActionType::Pick);
    let roll = scripted_expert(&s, &plan, &ExpertConfig::default()).unwrap();
    assert_eq!(roll.actions, vec![[0.0, 0.0, 0.0]]);
    assert!(roll.final_state.object(id).unwrap().held);
    assert_eq!(roll.chunks.len(), 1);
    assert_eq!(roll.chunks[0].horizon, 16);
}

#[test]
fn place_with_nothing_held_is_error() {
    let s = reset(&TaskConfig::new(TaskName::PickPlaceSingle), 4).unwrap();
    let mut plan = oracle_plan(&s, &input(&s));
    plan.action_type = ActionType::Place;
    assert!(scripted_expert(&s, &plan, &ExpertConfig::default()).is_err());
}

#[test]
fn click_ends_on_target() {
    for seed in 0..20 {
        let s = reset(&TaskConfig::new(TaskName::ClickAmongK).with_k(3), seed).unwrap();
        let plan = oracle_plan(&s, &input(&s));
        let roll = scripted_expert(&s, &plan, &ExpertConfig::default()).unwrap();
        let t = s.object(s.task.target_ids[0]).unwrap();
        let g = roll.final_state.gripper.pos;
        assert!((g[0] - t.center[0]).hypot(g[1] - t.center[1]) <= t.half_extent[0]);
        assert!(check_success(&roll.final_state));
    }
}

#[test]
fn click_on_distractor_fails() {
    for seed in 0..20 {
        let s = reset(&TaskConfig::new(TaskName::ClickAmongK).with_k(2), seed).unwrap();
        let target = s.task.target_ids[0];
        let other = s.objects.iter().find(|o| o.id != target).unwrap();
        let mut plan = oracle_plan(&s, &input(&s));
        plan.target_object = other.name();
        let roll = scripted_expert(&s, &plan, &ExpertConfig::default()).unwrap();
        assert!(!check_success(&roll.final_state));
        // wrong click is terminal for the oracle
        assert!(oracle_plan(&roll.final_state, &input(&roll.final_state)).is_terminal());
    }
}

#[test]
fn failed_pick_reissues_same_plan() {
    let s = reset(&TaskConfig::new(TaskName::PickPlaceSingle), 9).unwrap();
    let first = oracle_plan(&s, &input(&s));
    // close on empty space instead of grasping
    let mut t = s.clone();
    t.gripper.pos = [0.0, 0.0];
    let t = step(&t, &[0.0, 0.0, 0.0]).unwrap();
    assert!(t.held().is_none());
    let again = oracle_plan(&t, &input(&t));
    assert!(again.same_subtask(&first));
    assert_eq!(again.action_type, ActionType::Pick);
}

#[test]
fn after_pick_comes_place() {
    let s = reset(&TaskConfig::new(TaskName::PickPlaceAmongK).with_k(2), 3).unwrap();
    let plan = oracle_plan(&s, &input(&s));
    let roll = scripted_expert(&s, &plan, &ExpertConfig::default()).unwrap();
    let next = oracle_plan(&roll.final_state, &input(&roll.final_state));
    assert_eq!(next.action_type, ActionType::Place);
}
